"""AdamW with linear warmup into a constant learning rate, plus moment
carry-over across depth-growth events.

The optimizer state mirrors the parameter blocks tensor-for-tensor. When a
model is grown, surviving layers keep their moments bit-exactly (at their
shifted positions), duplicated layers receive bit-exact copies of the source
layer's moments, and freshly initialized layers start from zero moments; the
step counter, and with it the learning-rate position and bias correction,
continues uninterrupted.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import MappingError, StateError
from .model import LAYER_TENSOR_NAMES, ParamBlocks, layer_block_name


@dataclass(frozen=True)
class AdamHyper:
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def lr_at(hyper: AdamHyper, t: int) -> float:
    """Learning rate at step t: linear ramp over warmup_steps, then constant."""
    if hyper.warmup_steps > 0 and t < hyper.warmup_steps:
        return hyper.peak_lr * t / hyper.warmup_steps
    return hyper.peak_lr


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    hyper: AdamHyper


def init_opt_state(params: ParamBlocks, hyper: AdamHyper) -> OptState:
    m = {name: np.zeros_like(arr) for name, arr in params.named()}
    v = {name: np.zeros_like(arr) for name, arr in params.named()}
    return OptState(m=m, v=v, t=0, hyper=hyper)


def adamw_step(params: ParamBlocks, grads: ParamBlocks, state: OptState):
    """One decoupled-weight-decay Adam update; returns (params', state').

    Weight decay is applied multiplicatively first (p *= 1 - lr*wd), so a
    zero-gradient step with zero moments reduces exactly to the decay factor.
    """
    hyper = state.hyper
    t = state.t + 1
    lr = lr_at(hyper, t)
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t

    grad_map = grads.as_dict()
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.named():
        g = grad_map.get(name)
        if g is None or g.shape != p.shape:
            raise StateError(
                f"gradient for {name!r} is missing or mis-shaped "
                f"(param {p.shape}, grad {None if g is None else g.shape})"
            )
        m_old, v_old = state.m.get(name), state.v.get(name)
        if m_old is None or m_old.shape != p.shape or v_old is None or v_old.shape != p.shape:
            raise StateError(f"optimizer moments for {name!r} do not match parameter shape")
        m = hyper.beta1 * m_old + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v_old + (1.0 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p_new = p * (1.0 - lr * hyper.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_params[name] = p_new.astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)

    from .model import blocks_from_named

    return (
        blocks_from_named(params.config, new_params),
        OptState(m=new_m, v=new_v, t=t, hyper=hyper),
    )


def remap_state(state: OptState, layer_map, old_num_layers: int) -> OptState:
    """Rearrange per-layer moments to follow a growth layer map.

    Entries whose source is an old layer take (a copy of) that layer's
    moments; random-init entries get zero moments. Non-layer tensors and the
    step counter pass through unchanged.
    """
    def remap_one(table: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, arr in table.items():
            if not name.startswith("layer"):
                out[name] = arr.copy()
        for entry in layer_map.entries:
            new_prefix = layer_block_name(entry.position)
            if entry.source is None:
                src_prefix = layer_block_name(0)
                for tensor in LAYER_TENSOR_NAMES:
                    ref = table.get(f"{src_prefix}.{tensor}")
                    if ref is None:
                        raise MappingError(f"state has no layer tensor {src_prefix}.{tensor}")
                    out[f"{new_prefix}.{tensor}"] = np.zeros_like(ref)
            else:
                if not 0 <= entry.source < old_num_layers:
                    raise MappingError(
                        f"layer map references source layer {entry.source}, "
                        f"but state has layers 0..{old_num_layers - 1}"
                    )
                src_prefix = layer_block_name(entry.source)
                for tensor in LAYER_TENSOR_NAMES:
                    ref = table.get(f"{src_prefix}.{tensor}")
                    if ref is None:
                        raise MappingError(f"state has no layer tensor {src_prefix}.{tensor}")
                    out[f"{new_prefix}.{tensor}"] = ref.copy()
        return out

    return replace(state, m=remap_one(state.m), v=remap_one(state.v))
