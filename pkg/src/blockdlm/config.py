"""Strict JSON run configuration.

Every section is optional and defaults to the paper-style values; unknown
keys are rejected anywhere in the tree. ``validate_config`` returns the
fully resolved dict (defaults filled in), which is what gets fingerprinted
and embedded in reports so any run can be replayed exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json

from blockdlm.decoding import HighConfidenceModel
from blockdlm.model import BlockDiffusionLM, ModelConfig
from blockdlm.moe import MoEConfig
from blockdlm.sprint import PruneConfig, UnmaskMode, UnmaskPolicy
from blockdlm.vocab import TokenVocabulary, build_vocabulary


class ConfigError(ValueError):
    """Schema violation; the CLI maps this to exit code 2."""


_DEFAULTS: dict = {
    "seed": 0,
    "model": {
        "type": "transformer",
        "vocab": {"text_size": 200, "visual_size": 16, "resolutions": [256]},
        "block_size": 8,
        "d_model": 32,
        "n_heads": 4,
        "n_layers": 2,
        "d_ff": 64,
        "rope_base": 10000.0,
        "init_seed": 42,
        "margin": 30.0,
        "moe": None,
    },
    "generate": {
        "n_blocks": 4,
        "steps": 8,
        "mode": "both",
        "policy": {"tau": 0.95, "mode": "ADAPTIVE"},
        "prune": {"alpha": 0.5, "r_text": 1.0, "r_img": 1.0, "r_global": 1.0},
        "prompt": {"length": 8, "image_length": 0, "resolution": None},
        "gen_modality": "TEXT",
        "temperature": 0.0,
    },
    "pack": {
        "capacity": 64,
        "corpus": None,
        "synthetic": {"n": 40, "min_len": 4, "max_len": 48},
        "block_size": None,
        "out": None,
    },
    "moesim": {
        "n_experts": 4,
        "top_k": 1,
        "gate_scale": 2.5,
        "update_rate": -0.01,
        "steps": 500,
        "gate_logits": [2.0, 0.0, 0.0, 0.0],
    },
    "flow": {
        "dim": 2,
        "hidden": 64,
        "n_codes": 2,
        "z_dim": 8,
        "means": [[2.0, 2.0], [-2.0, -2.0]],
        "std": 0.5,
        "fm_iters": 3000,
        "distill_iters": 1500,
        "batch": 256,
        "lr_fm": 5e-3,
        "lr_distill": 1e-3,
        "eps": 1e-3,
        "teacher_steps": 50,
        "student_steps": 8,
        "n_samples": 2048,
        "save": None,
    },
    "gradcheck": {"eps": 1e-6, "threshold": 1e-4, "init_scale": 0.25},
    "compare": {"report_a": None, "report_b": None},
}

_MOE_DEFAULTS = {
    "n_experts": 4,
    "top_k": 1,
    "gate_scale": 2.5,
    "update_rate": -0.01,
    "d_expert": 0,
}


def _merge(defaults, given, path: str):
    if given is None:
        return copy.deepcopy(defaults)
    if isinstance(defaults, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: expected an object, got {type(given).__name__}")
        unknown = set(given) - set(defaults)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        out = {}
        for key, default_value in defaults.items():
            sub_path = f"{path}.{key}" if path else key
            if key in given:
                # None-valued defaults (nullable leaves) accept any shape
                # their dedicated validator understands; merge recursively
                # only when the default gives a schema to merge into.
                if isinstance(default_value, dict) and isinstance(given[key], dict):
                    out[key] = _merge(default_value, given[key], sub_path)
                else:
                    out[key] = copy.deepcopy(given[key])
            else:
                out[key] = copy.deepcopy(default_value)
        return out
    return copy.deepcopy(given)


def validate_config(raw: dict | None) -> dict:
    """Fill defaults and reject unknown keys; returns the resolved config."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object")
    resolved = _merge(_DEFAULTS, raw, "")
    moe = resolved["model"].get("moe")
    if moe is not None:
        unknown = set(moe) - set(_MOE_DEFAULTS)
        if unknown:
            raise ConfigError(f"model.moe: unknown keys {sorted(unknown)}")
        resolved["model"]["moe"] = {**_MOE_DEFAULTS, **moe}
    if resolved["model"]["type"] not in ("transformer", "synthetic_high_confidence"):
        raise ConfigError(f"model.type {resolved['model']['type']!r} unknown")
    if resolved["generate"]["mode"] not in ("baseline", "sprint", "both"):
        raise ConfigError(f"generate.mode {resolved['generate']['mode']!r} unknown")
    if resolved["generate"]["policy"]["mode"] not in ("ADAPTIVE", "FIXED"):
        raise ConfigError("generate.policy.mode must be ADAPTIVE or FIXED")
    if not isinstance(resolved["seed"], int):
        raise ConfigError("seed must be an integer")
    return resolved


def load_config(path: str | None) -> dict:
    if path is None:
        return validate_config({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def fingerprint(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --- builders ---------------------------------------------------------------


def build_vocab(cfg: dict) -> TokenVocabulary:
    return build_vocabulary(cfg["text_size"], cfg["visual_size"], cfg["resolutions"])


def build_model(cfg: dict):
    vocab = build_vocab(cfg["vocab"])
    if cfg["type"] == "synthetic_high_confidence":
        return HighConfidenceModel(vocab, cfg["block_size"], margin=cfg["margin"])
    moe = None
    if cfg["moe"] is not None:
        m = cfg["moe"]
        moe = MoEConfig(
            n_experts=m["n_experts"],
            top_k=m["top_k"],
            gate_scale=m["gate_scale"],
            update_rate=m["update_rate"],
            d_expert=m["d_expert"],
        )
    model_cfg = ModelConfig(
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_layers=cfg["n_layers"],
        d_ff=cfg["d_ff"],
        vocab=vocab,
        block_size=cfg["block_size"],
        rope_base=cfg["rope_base"],
        moe=moe,
    )
    model = BlockDiffusionLM(model_cfg)
    model.init_params(cfg["init_seed"])
    return model


def build_policy(cfg: dict, steps: int) -> UnmaskPolicy:
    return UnmaskPolicy(tau=cfg["tau"], total_steps=steps, mode=UnmaskMode(cfg["mode"]))


def build_prune(cfg: dict | None) -> PruneConfig | None:
    if cfg is None:
        return None
    return PruneConfig(
        alpha=cfg["alpha"],
        r_text=cfg["r_text"],
        r_img=cfg["r_img"],
        r_global=cfg["r_global"],
    )
