"""Command runners behind the CLI: build, run, measure, replay.

Each runner is a pure function of (resolved config, seed) returning the
report payload; replaying a persisted report just re-invokes the runner
with the embedded config and seed.
"""

from __future__ import annotations

import numpy as np
import torch

from blockdlm import flow as flow_mod
from blockdlm.config import build_model, build_policy, build_prune, build_vocab
from blockdlm.decoding import generate
from blockdlm.model import BlockDiffusionLM, ModelConfig
from blockdlm.moe import MoEConfig, simulate_balancing
from blockdlm.objectives import (
    bdlm_loss,
    bdlm_loss_value,
    complementary_pair,
    corrupt,
    finite_difference_grads,
    max_relative_error,
    sft_loss,
    sft_loss_value,
)
from blockdlm.packing import naive_padding, pack, pad_to_block, total_padding
from blockdlm.serialize import save_module
from blockdlm.sprint import UnmaskMode, UnmaskPolicy
from blockdlm.vocab import (
    Modality,
    ModalitySpan,
    TokenSequence,
    TokenVocabulary,
    annotate_image_block,
    read_corpus,
    sequence_to_record,
    text_sequence,
)


def configure_determinism() -> None:
    """Single-threaded torch keeps reductions bit-reproducible run to run."""
    torch.set_num_threads(1)


def build_prompt(cfg: dict, vocab: TokenVocabulary, block_size: int, seed: int) -> TokenSequence:
    """Seeded synthetic prompt: text tokens plus an optional annotated image."""
    rng = np.random.default_rng(seed)
    length = cfg["length"]
    if length < 1:
        raise ValueError("prompt length must be >= 1")
    seq = text_sequence([int(x) for x in rng.integers(0, vocab.text_size, size=length)], block_size)
    if cfg["image_length"]:
        if vocab.visual_size == 0:
            raise ValueError("image prompt requested but the vocabulary has no visual tokens")
        image_ids = [
            vocab.id_of_visual(int(x))
            for x in rng.integers(0, vocab.visual_size, size=cfg["image_length"])
        ]
        seq = seq.append_block(image_ids, Modality.IMAGE)
        resolution = cfg["resolution"]
        if resolution is not None:
            size_tok = vocab.special_id(f"imgsize_{resolution}")
            seq = annotate_image_block(seq, length, size_tok, size_tok, vocab)
    return seq


def _generation_payload(mode: str, result, prompt_len: int) -> dict:
    return {
        "mode": mode,
        "prompt_len": prompt_len,
        "tokens": list(result.tokens.ids),
        "nfe": result.nfe,
        "attended": result.attended,
        "wall_ns": result.wall_ns,
        "per_block_steps": list(result.per_block_steps),
    }


def run_generate(config: dict, seed: int) -> list[dict]:
    """Run the baseline and/or accelerated decoder per the config."""
    model = build_model(config["model"])
    g = config["generate"]
    vocab = model.config.vocab
    block_size = model.config.block_size
    prompt = build_prompt(g["prompt"], vocab, block_size, seed)
    rng = np.random.default_rng(seed + 1)

    modes = ("baseline", "sprint") if g["mode"] == "both" else (g["mode"],)
    payloads = []
    for mode in modes:
        if mode == "baseline":
            policy = UnmaskPolicy(tau=0.0, total_steps=g["steps"], mode=UnmaskMode.FIXED)
            prune = None
        else:
            policy = build_policy(g["policy"], g["steps"])
            prune = build_prune(g["prune"])
        result = generate(
            model,
            prompt,
            n_blocks=g["n_blocks"],
            block_size=block_size,
            steps=g["steps"],
            policy=policy,
            prune=prune,
            gen_modality=Modality(g["gen_modality"]),
            temperature=g["temperature"],
            rng=rng,
        )
        payloads.append(_generation_payload(mode, result, len(prompt)))
    return payloads


def run_moesim(config: dict, seed: int) -> dict:
    m = config["moesim"]
    cfg = MoEConfig(
        n_experts=m["n_experts"],
        top_k=m["top_k"],
        gate_scale=m["gate_scale"],
        update_rate=m["update_rate"],
    )
    if len(m["gate_logits"]) != m["n_experts"]:
        raise ValueError("gate_logits length must equal n_experts")
    traj = simulate_balancing(list(m["gate_logits"]), cfg, m["steps"])
    return {
        "steps": m["steps"],
        "initial_gap": traj["gaps"][0],
        "final_gap": traj["gaps"][-1],
        "final_load": traj["loads"][-1],
        "min_final_load": min(traj["loads"][-1]),
        "gap_trajectory": traj["gaps"][:: max(1, m["steps"] // 50)],
    }


def run_pack(config: dict, seed: int) -> dict:
    p = config["pack"]
    capacity = p["capacity"]
    block = p["block_size"]
    vocab = build_vocab(config["model"]["vocab"])
    if p["corpus"] is not None:
        records = list(read_corpus(p["corpus"]))
        raw_lengths = [len(r["ids"]) for r in records]
    else:
        s = p["synthetic"]
        rng = np.random.default_rng(seed)
        raw_lengths = [int(rng.integers(s["min_len"], s["max_len"] + 1)) for _ in range(s["n"])]
        records = [
            sequence_to_record(
                text_sequence(
                    [int(x) for x in rng.integers(0, vocab.text_size, size=n)], block or 1
                )
            )
            for n in raw_lengths
        ]
    # segments are padded up to block multiples before packing so block and
    # segment boundaries coincide inside every packed row
    eff_lengths = [pad_to_block(n, block) if block else n for n in raw_lengths]
    samples = list(enumerate(eff_lengths))
    packed = pack(samples, capacity)
    payload = {
        "n_samples": len(samples),
        "n_rows": len(packed),
        "total_padding": total_padding(packed),
        "segment_padding": sum(e - r for e, r in zip(eff_lengths, raw_lengths)),
        "naive_padding": naive_padding(samples, capacity),
        "utilization": 1.0 - total_padding(packed) / (len(packed) * capacity),
        # packed rows are many samples for loss purposes: the masked-count
        # reweighting applies per original segment, never per row
        "loss_convention": "beta per original segment",
    }
    if p["out"] is not None:
        _write_packed_shards(p["out"], packed, records, raw_lengths, vocab, block)
        payload["out"] = p["out"]
    return payload


def _write_packed_shards(path, packed, records, raw_lengths, vocab, block):
    """Packed rows in the corpus wire format plus a segment sidecar."""
    import json

    pad_id = vocab.special_id("EOS")
    sidecar = {"block_size": block, "rows": []}
    with open(path, "w", encoding="utf-8") as fh:
        for row_idx, row in enumerate(packed):
            ids: list[int] = []
            spans: list[ModalitySpan] = []
            for seg in row.segments:
                record = records[seg.sample_id]
                base = len(ids)
                ids.extend(record["ids"])
                for s, e, m in record["spans"]:
                    spans.append(ModalitySpan(base + s, base + e, Modality(m)))
                tail = seg.length - raw_lengths[seg.sample_id]
                if tail:
                    ids.extend([pad_id] * tail)
                    spans.append(
                        ModalitySpan(len(ids) - tail, len(ids), Modality.SPECIAL)
                    )
            if row.pad:
                ids.extend([pad_id] * row.pad)
                spans.append(ModalitySpan(len(ids) - row.pad, len(ids), Modality.SPECIAL))
            seq = TokenSequence(tuple(ids), tuple(spans), block or 1)
            fh.write(json.dumps(sequence_to_record(seq)) + "\n")
            sidecar["rows"].append(
                {
                    "row": row_idx,
                    "segments": [list(s) for s in row.segments],
                    "pad": row.pad,
                }
            )
    with open(path + ".segments.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)


def _tiny_vocab() -> TokenVocabulary:
    return TokenVocabulary(text_size=10, visual_size=0, special=("MASK",))


def _tiny_model(init_scale: float, moe: bool = False) -> BlockDiffusionLM:
    vocab = _tiny_vocab()
    moe_cfg = MoEConfig(n_experts=3, top_k=2, d_expert=4) if moe else None
    cfg = ModelConfig(
        d_model=4, n_heads=2, n_layers=1, d_ff=8, vocab=vocab, block_size=2, moe=moe_cfg
    )
    model = BlockDiffusionLM(cfg)
    model.init_params(7, scale=init_scale)
    return model


def run_gradcheck(config: dict, seed: int) -> dict:
    """Analytic-vs-finite-difference table over all four loss operations."""
    gc = config["gradcheck"]
    eps, threshold = gc["eps"], gc["threshold"]
    rng = np.random.default_rng(seed)
    vocab = _tiny_vocab()
    # Short sequence keeps |loss| small so the finite-difference roundoff
    # floor stays well inside the pass threshold.
    x0 = text_sequence([int(x) for x in rng.integers(0, 10, size=4)], block_size=2)

    rows = []

    def add_row(name, module, analytic, loss_fn):
        numeric = finite_difference_grads(loss_fn, module, eps=eps)
        err = max_relative_error(analytic, numeric)
        rows.append(
            {
                "loss": name,
                "n_params": sum(p.numel() for p in module.parameters()),
                "max_rel_err": err,
                "ok": err < threshold,
            }
        )

    model = _tiny_model(gc["init_scale"])
    batch = corrupt(x0, 0.8, rng, vocab, prompt_len=2)
    _, grads = bdlm_loss(model, batch)
    add_row("bdlm_loss", model, grads, lambda: bdlm_loss_value(model, batch))

    pair = complementary_pair(x0, 0.7, rng, vocab, prompt_len=2)
    _, grads = sft_loss(model, list(pair))
    add_row("sft_loss", model, grads, lambda: sft_loss_value(model, list(pair)))

    moe_model = _tiny_model(gc["init_scale"], moe=True)
    _, grads = bdlm_loss(moe_model, batch)
    add_row("bdlm_loss[moe]", moe_model, grads, lambda: bdlm_loss_value(moe_model, batch))

    net = flow_mod.FlowNet(dim=2, hidden=8, n_codes=2, z_dim=4)
    net.init_params(11)
    spec = flow_mod.MixtureSpec(means=((2.0, 2.0), (-2.0, -2.0)), std=0.5)
    path, codes = flow_mod.make_training_batch(spec, 4, rng)
    _, grads = flow_mod.fm_loss(net, path, codes)
    add_row("fm_loss", net, grads, lambda: flow_mod.fm_loss_value(net, path, codes))

    frozen = flow_mod.clone_net(net)
    _, grads = flow_mod.distill_loss(net, path, codes, eps=1e-3, frozen=frozen)
    add_row(
        "distill_loss",
        net,
        grads,
        lambda: flow_mod.distill_loss_value(net, path, codes, 1e-3, frozen),
    )

    return {
        "eps": eps,
        "threshold": threshold,
        "rows": rows,
        "all_ok": all(r["ok"] for r in rows),
        # pre-training reduction over samples is a mean, not a sum
        "batch_reduction": "mean",
    }


def run_flow(config: dict, seed: int) -> dict:
    """Teacher training, distillation, and the teacher/student comparison."""
    f = config["flow"]
    spec = flow_mod.MixtureSpec(
        means=tuple(tuple(float(v) for v in mean) for mean in f["means"]), std=f["std"]
    )
    if spec.n_codes != f["n_codes"]:
        raise ValueError("flow.means must list one mode per condition code")
    net = flow_mod.FlowNet(dim=f["dim"], hidden=f["hidden"], n_codes=f["n_codes"], z_dim=f["z_dim"])
    net.init_params(seed)
    rng = np.random.default_rng(seed + 1)
    fm_losses = flow_mod.train_flow_matching(
        net, spec, rng, iters=f["fm_iters"], batch=f["batch"], lr=f["lr_fm"]
    )
    teacher = flow_mod.clone_net(net)
    distill_losses = flow_mod.distill_few_step(
        net, spec, rng, iters=f["distill_iters"], batch=f["batch"], lr=f["lr_distill"], eps=f["eps"]
    )
    student = net.deployment_copy()
    if f["save"] is not None:
        meta = {"kind": "flow", "dim": f["dim"], "hidden": f["hidden"],
                "n_codes": f["n_codes"], "z_dim": f["z_dim"]}
        save_module(f["save"], net, {**meta, "role": "distilled"})
        save_module(f["save"] + ".teacher", teacher, {**meta, "role": "teacher"})

    sample_rng = np.random.default_rng(seed + 2)
    per_code = []
    for code in range(f["n_codes"]):
        z = torch.full((f["n_samples"],), code, dtype=torch.long)
        teacher_clouds = [
            flow_mod.sample(teacher, z, f["teacher_steps"], sample_rng) for _ in range(3)
        ]
        student_cloud = flow_mod.sample(student, z, f["student_steps"], sample_rng)
        self_eds = [
            flow_mod.energy_distance(teacher_clouds[0], teacher_clouds[1]),
            flow_mod.energy_distance(teacher_clouds[0], teacher_clouds[2]),
            flow_mod.energy_distance(teacher_clouds[1], teacher_clouds[2]),
        ]
        ed = flow_mod.energy_distance(student_cloud, teacher_clouds[0])
        self_ed = float(np.mean(self_eds))
        per_code.append(
            {
                "code": code,
                "energy_distance": ed,
                "teacher_self_distance": self_ed,
                "ratio": ed / self_ed if self_ed else None,
                "student_mean": [float(v) for v in student_cloud.mean(dim=0)],
                "teacher_mean": [float(v) for v in teacher_clouds[0].mean(dim=0)],
                "true_mean": list(spec.means[code]),
            }
        )
    return {
        "fm_final_loss": fm_losses[-1],
        "distill_final_loss": distill_losses[-1],
        "teacher_steps": f["teacher_steps"],
        "student_steps": f["student_steps"],
        "per_code": per_code,
        "all_within_2x": all(c["ratio"] is not None and c["ratio"] <= 2.0 for c in per_code),
    }


def run_generate_multi(config: dict, seeds: list[int], jobs: int = 1) -> list[tuple[int, list[dict]]]:
    """Independent seeds, optionally in parallel; output order follows seeds."""
    if jobs <= 1 or len(seeds) <= 1:
        return [(s, run_generate(config, s)) for s in seeds]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda s: run_generate(config, s), seeds))
    return list(zip(seeds, results))


RUNNERS = {
    "generate": run_generate,
    "moesim": run_moesim,
    "pack": run_pack,
    "gradcheck": run_gradcheck,
    "flow": run_flow,
}


def replay(report: dict) -> dict | list[dict]:
    """Re-execute a persisted report from its embedded config and seed."""
    command = report["command"]
    if command not in RUNNERS:
        raise ValueError(f"cannot replay command {command!r}")
    payload = RUNNERS[command](report["config"], report["seed"])
    if command == "generate":
        wanted = report.get("mode")
        for p in payload:
            if p["mode"] == wanted:
                return p
        raise ValueError(f"replay produced no {wanted!r} run")
    return payload
