"""Per-parameter trainability map for the two fine-tuning presets.

Preset ``artgpt4`` trains the adapters in every block, every pre-MLP norm
gain, the pre-attention norm gain in odd blocks (1-based: blocks 1, 3,
5, ...), and the vision projection. Preset ``minigpt4`` trains the vision
projection only. Everything else, attention and MLP projections,
embeddings, unembedding, final norm, and the frozen vision stubs, stays
untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import bottleneck_dim
from .model import Model, ModelConfig

PRESETS = ("artgpt4", "minigpt4")


class PolicyError(ValueError):
    """Policy paths do not line up with the model's parameters."""


def config_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Path -> shape for every parameter a model with this config owns."""
    h, inner, v = cfg.hidden, cfg.mlp_inner, cfg.vocab_size
    k = bottleneck_dim(h)
    shapes: dict[str, tuple[int, ...]] = {"embedding": (v, h)}
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        shapes[f"{p}.norm_attn_gain"] = (h,)
        shapes[f"{p}.wq"] = (h, h)
        shapes[f"{p}.wk"] = (h, h)
        shapes[f"{p}.wv"] = (h, h)
        shapes[f"{p}.wo"] = (h, h)
        if cfg.adapters_enabled:
            shapes[f"{p}.adapter.w_down"] = (h, k)
            shapes[f"{p}.adapter.b_down"] = (k,)
            shapes[f"{p}.adapter.w_up"] = (k, h)
            shapes[f"{p}.adapter.b_up"] = (h,)
        shapes[f"{p}.norm_mlp_gain"] = (h,)
        shapes[f"{p}.w_gate"] = (h, inner)
        shapes[f"{p}.w_up_mlp"] = (h, inner)
        shapes[f"{p}.w_down_mlp"] = (inner, h)
    shapes["final_norm_gain"] = (h,)
    shapes["unembed"] = (h, v)
    if cfg.positional_mode == "absolute":
        shapes["pos_table"] = (cfg.max_seq, h)
    shapes["vision.patch_w"] = (16, cfg.vis_width)
    shapes["vision.patch_b"] = (cfg.vis_width,)
    shapes["vision.queries"] = (cfg.n_query, cfg.vis_width)
    shapes["vision.proj_w"] = (cfg.vis_width, h)
    shapes["vision.proj_b"] = (h,)
    return shapes


def _trainable_under(path: str, block_index: int | None, preset: str) -> bool:
    if path in ("vision.proj_w", "vision.proj_b"):
        return True
    if preset == "minigpt4":
        return False
    if block_index is None:
        return False
    field = path.split(".", 2)[2]
    if field.startswith("adapter."):
        return True
    if field == "norm_mlp_gain":
        return True
    if field == "norm_attn_gain":
        return (block_index + 1) % 2 == 1  # 1-based odd blocks
    return False


@dataclass(frozen=True)
class ParamPolicy:
    preset: str
    entries: dict[str, bool]            # path -> trainable
    shapes: dict[str, tuple[int, ...]]  # path -> shape

    def trainable_paths(self) -> list[str]:
        return [p for p, t in self.entries.items() if t]

    def frozen_paths(self) -> list[str]:
        return [p for p, t in self.entries.items() if not t]

    def count(self, trainable: bool) -> int:
        return sum(int(np.prod(self.shapes[p])) for p, t in self.entries.items()
                   if t == trainable)


def build_policy(cfg: ModelConfig, preset: str) -> ParamPolicy:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    shapes = config_param_shapes(cfg)
    entries: dict[str, bool] = {}
    for path in shapes:
        block_index = int(path.split(".")[1]) if path.startswith("blocks.") else None
        entries[path] = _trainable_under(path, block_index, preset)
    return ParamPolicy(preset=preset, entries=entries, shapes=shapes)


def apply_policy(model: Model, policy: ParamPolicy) -> dict[str, "object"]:
    """Set requires_grad per the policy; returns the trainable param map.

    Raises PolicyError unless the policy covers exactly the model's
    parameters (no orphans, no extras).
    """
    params = model.named_params()
    if set(params) != set(policy.entries):
        missing = sorted(set(params) - set(policy.entries))
        extra = sorted(set(policy.entries) - set(params))
        raise PolicyError(f"policy/model mismatch: missing {missing}, extra {extra}")
    for path, p in params.items():
        if p.shape != tuple(policy.shapes[path]):
            raise PolicyError(
                f"{path}: model shape {p.shape} != policy shape {policy.shapes[path]}"
            )
        p.requires_grad = policy.entries[path]
        p.grad = None
    return {path: p for path, p in params.items() if policy.entries[path]}


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {path: p.data.copy() for path, p in model.named_params().items()}


def assert_frozen_unchanged(before: dict[str, np.ndarray],
                            after: dict[str, np.ndarray],
                            policy: ParamPolicy) -> bool:
    """True iff every policy-frozen parameter is bitwise identical."""
    if set(before) != set(after):
        raise PolicyError("snapshots cover different parameter paths")
    if set(before) != set(policy.entries):
        raise PolicyError("snapshot paths do not match the policy")
    return all(
        before[p].tobytes() == after[p].tobytes()
        for p in policy.frozen_paths()
    )


def policy_table(policy: ParamPolicy) -> list[tuple[str, tuple[int, ...], bool, int]]:
    """Rows of (path, shape, trainable, scalar count) in parameter order."""
    return [
        (path, policy.shapes[path], trainable, int(np.prod(policy.shapes[path])))
        for path, trainable in policy.entries.items()
    ]


def render_policy_text(policy: ParamPolicy) -> str:
    rows = policy_table(policy)
    path_w = max(len(r[0]) for r in rows)
    shape_w = max(len(str(r[1])) for r in rows)
    lines = [f"preset: {policy.preset}",
             f"{'path':<{path_w}}  {'shape':<{shape_w}}  trainable  count"]
    for path, shape, trainable, count in rows:
        flag = "yes" if trainable else "no"
        lines.append(f"{path:<{path_w}}  {str(shape):<{shape_w}}  {flag:<9}  {count}")
    lines.append(f"trainable total: {policy.count(True)}")
    lines.append(f"frozen total:    {policy.count(False)}")
    return "\n".join(lines) + "\n"


def policy_json(policy: ParamPolicy) -> dict:
    return {
        "preset": policy.preset,
        "entries": [
            {"path": path, "shape": list(shape), "trainable": trainable, "count": count}
            for path, shape, trainable, count in policy_table(policy)
        ],
        "trainable_total": policy.count(True),
        "frozen_total": policy.count(False),
    }
