"""Decoder-only transformer with layer-addressable parameter blocks.

The architecture is a pre-layer-norm causal LM with learned positional
embeddings, GELU MLPs, and a separate (untied) output head. Parameters live
in plain numpy arrays grouped into named blocks so that depth surgery can
copy, shift, and insert whole layers; the autodiff tape is built fresh on
every forward call and discarded afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError

INIT_STD = 0.02

# Canonical per-layer tensor names; order fixes enumeration, init draws, and
# the checkpoint blob layout. Shapes are functions of (d_model, d_ff).
LAYER_TENSOR_NAMES = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int

    def validate(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ff < 1 or self.max_seq_len < 1:
            raise ConfigError("d_model, n_heads, d_ff, max_seq_len must all be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")

    def with_layers(self, num_layers: int) -> "ModelConfig":
        return replace(self, num_layers=num_layers)


def layer_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {}
    for name in LAYER_TENSOR_NAMES:
        if name.startswith("ln"):
            shapes[name] = (d,)
        elif name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            shapes[name] = (d, d)
        elif name.startswith("attn.b"):
            shapes[name] = (d,)
        elif name == "mlp.w1":
            shapes[name] = (d, f)
        elif name == "mlp.b1":
            shapes[name] = (f,)
        elif name == "mlp.w2":
            shapes[name] = (f, d)
        elif name == "mlp.b2":
            shapes[name] = (d,)
    return shapes


def layer_block_name(index: int) -> str:
    return f"layer{index:02d}"


@dataclass
class ParamBlocks:
    """All model parameters, grouped so layers are individually addressable."""

    config: ModelConfig
    embedding: dict[str, np.ndarray]
    layers: list[dict[str, np.ndarray]]
    final_norm: dict[str, np.ndarray]
    head: dict[str, np.ndarray]

    def named(self):
        """Yield (unique name, array) in canonical checkpoint order."""
        for k in ("tok_emb", "pos_emb"):
            yield f"emb.{k}", self.embedding[k]
        for i, layer in enumerate(self.layers):
            prefix = layer_block_name(i)
            for k in LAYER_TENSOR_NAMES:
                yield f"{prefix}.{k}", layer[k]
        yield "final.ln_f.g", self.final_norm["ln_f.g"]
        yield "final.ln_f.b", self.final_norm["ln_f.b"]
        yield "head.w", self.head["w"]
        yield "head.b", self.head["b"]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named())

    def validate(self):
        self.config.validate()
        if len(self.layers) != self.config.num_layers:
            raise ConfigError(
                f"expected {self.config.num_layers} layer blocks, got {len(self.layers)}"
            )
        shapes = layer_tensor_shapes(self.config)
        for i, layer in enumerate(self.layers):
            if set(layer) != set(LAYER_TENSOR_NAMES):
                raise ConfigError(f"layer {i} has unexpected tensor names")
            for k, arr in layer.items():
                if arr.shape != shapes[k]:
                    raise ConfigError(
                        f"layer {i} tensor {k} has shape {arr.shape}, expected {shapes[k]}"
                    )
        names = [n for n, _ in self.named()]
        if len(names) != len(set(names)):
            raise ConfigError("tensor names are not unique within the checkpoint")


def _trunc_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std, via rejection resampling."""
    out = gen.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = gen.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_layer(config: ModelConfig, gen: np.random.Generator) -> dict[str, np.ndarray]:
    """One freshly initialized layer block: trunc-normal weights, zero biases,
    unit layer-norm gains."""
    shapes = layer_tensor_shapes(config)
    block = {}
    for name in LAYER_TENSOR_NAMES:
        shape = shapes[name]
        if name.endswith(".g"):
            block[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or name in ("mlp.b1", "mlp.b2"):
            block[name] = np.zeros(shape, dtype=np.float32)
        else:
            block[name] = _trunc_normal(gen, shape, INIT_STD)
    return block


def init_model(config: ModelConfig, seed: int) -> ParamBlocks:
    """Allocate and initialize all parameter blocks, deterministically in
    (config, seed)."""
    config.validate()
    gen = np.random.Generator(np.random.PCG64(seed))
    embedding = {
        "tok_emb": _trunc_normal(gen, (config.vocab_size, config.d_model), INIT_STD),
        "pos_emb": _trunc_normal(gen, (config.max_seq_len, config.d_model), INIT_STD),
    }
    layers = [init_layer(config, gen) for _ in range(config.num_layers)]
    final_norm = {
        "ln_f.g": np.ones(config.d_model, dtype=np.float32),
        "ln_f.b": np.zeros(config.d_model, dtype=np.float32),
    }
    head = {
        "w": _trunc_normal(gen, (config.d_model, config.vocab_size), INIT_STD),
        "b": np.zeros(config.vocab_size, dtype=np.float32),
    }
    params = ParamBlocks(config, embedding, layers, final_norm, head)
    params.validate()
    return params


def param_count(config: ModelConfig) -> int:
    total = config.vocab_size * config.d_model + config.max_seq_len * config.d_model
    per_layer = sum(
        int(np.prod(s)) for s in layer_tensor_shapes(config).values()
    )
    total += config.num_layers * per_layer
    total += 2 * config.d_model
    total += config.d_model * config.vocab_size + config.vocab_size
    return total


def params_digest(params: ParamBlocks) -> str:
    """Content digest over every tensor, for bit-identity assertions."""
    h = hashlib.blake2b(digest_size=16)
    for name, arr in params.named():
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def blocks_from_named(config: ModelConfig, mapping: dict[str, np.ndarray]) -> ParamBlocks:
    """Rebuild structured blocks from a flat {name: array} mapping."""
    embedding = {k: mapping[f"emb.{k}"] for k in ("tok_emb", "pos_emb")}
    layers = [
        {k: mapping[f"{layer_block_name(i)}.{k}"] for k in LAYER_TENSOR_NAMES}
        for i in range(config.num_layers)
    ]
    final_norm = {k: mapping[f"final.{k}"] for k in ("ln_f.g", "ln_f.b")}
    head = {k: mapping[f"head.{k}"] for k in ("w", "b")}
    return ParamBlocks(config, embedding, layers, final_norm, head)


def _check_batch(config: ModelConfig, tokens: np.ndarray):
    if tokens.ndim != 2:
        raise DataError(f"token batch must be 2-d (batch, seq), got shape {tokens.shape}")
    if tokens.shape[1] < 2:
        raise DataError("sequences must hold at least 2 tokens to form a prediction target")
    if tokens.shape[1] > config.max_seq_len:
        raise DataError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise DataError(
            f"token ids must lie in [0, {config.vocab_size}), "
            f"got range [{tokens.min()}, {tokens.max()}]"
        )


def _forward_graph(params: ParamBlocks, tokens: np.ndarray, dtype):
    """Build the tape for one batch; returns (loss tensor, name -> leaf)."""
    config = params.config
    _check_batch(config, tokens)
    leaves = {name: ad.leaf(arr.astype(dtype, copy=False)) for name, arr in params.named()}

    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    b, t = inputs.shape
    d, h = config.d_model, config.n_heads
    hs = d // h

    tok = ad.gather_rows(leaves["emb.tok_emb"], inputs.ravel())
    x = ad.add(ad.reshape(tok, (b, t, d)), ad.slice_rows(leaves["emb.pos_emb"], t))

    for i in range(config.num_layers):
        p = layer_block_name(i)
        a = ad.layer_norm(x, leaves[f"{p}.ln1.g"], leaves[f"{p}.ln1.b"])
        q = ad.add(ad.matmul(a, leaves[f"{p}.attn.wq"]), leaves[f"{p}.attn.bq"])
        k = ad.add(ad.matmul(a, leaves[f"{p}.attn.wk"]), leaves[f"{p}.attn.bk"])
        v = ad.add(ad.matmul(a, leaves[f"{p}.attn.wv"]), leaves[f"{p}.attn.bv"])
        q4 = ad.transpose(ad.reshape(q, (b, t, h, hs)), (0, 2, 1, 3))
        k4 = ad.transpose(ad.reshape(k, (b, t, h, hs)), (0, 2, 1, 3))
        v4 = ad.transpose(ad.reshape(v, (b, t, h, hs)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q4, ad.transpose(k4, (0, 1, 3, 2))), 1.0 / np.sqrt(hs))
        probs = ad.causal_softmax(scores)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v4), (0, 2, 1, 3)), (b, t, d))
        attn_out = ad.add(ad.matmul(ctx, leaves[f"{p}.attn.wo"]), leaves[f"{p}.attn.bo"])
        x = ad.add(x, attn_out)

        a2 = ad.layer_norm(x, leaves[f"{p}.ln2.g"], leaves[f"{p}.ln2.b"])
        hidden = ad.gelu(ad.add(ad.matmul(a2, leaves[f"{p}.mlp.w1"]), leaves[f"{p}.mlp.b1"]))
        mlp_out = ad.add(ad.matmul(hidden, leaves[f"{p}.mlp.w2"]), leaves[f"{p}.mlp.b2"])
        x = ad.add(x, mlp_out)

    x = ad.layer_norm(x, leaves["final.ln_f.g"], leaves["final.ln_f.b"])
    logits = ad.add(ad.matmul(x, leaves["head.w"]), leaves["head.b"])
    flat = ad.reshape(logits, (b * t, config.vocab_size))
    loss = ad.cross_entropy(flat, targets.ravel())
    return loss, leaves


def forward_loss(params: ParamBlocks, tokens: np.ndarray, dtype=np.float32) -> float:
    """Mean next-token cross-entropy (nats) of one batch.

    Finite for finite parameters; a diverged (non-finite) parameter state
    propagates quietly to a non-finite loss so callers can detect it.
    """
    loss, _ = _forward_graph(params, tokens, dtype)
    return float(loss.data)


def backward(params: ParamBlocks, tokens: np.ndarray, dtype=np.float32):
    """Loss and its gradient with respect to every parameter tensor."""
    loss, leaves = _forward_graph(params, tokens, dtype)
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }
    return float(loss.data), blocks_from_named(params.config, grads)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    passed: bool
    worst_coordinate: tuple[str, int] = field(default=("", 0))


def grad_check(fn, grad_fn, params: dict[str, np.ndarray], n_coords: int,
               h: float, tolerance: float, seed: int = 0) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    ``fn`` maps {name: array} to a scalar; ``grad_fn`` maps the same input to
    {name: gradient array}. ``n_coords`` coordinates are sampled uniformly
    over the concatenated parameter space. Relative error per coordinate is
    |analytic - fd| / (|fd| + 1e-12).
    """
    if n_coords < 1:
        raise ConfigError(f"n_coords must be >= 1, got {n_coords}")
    if h <= 0:
        raise ConfigError(f"step h must be > 0, got {h}")

    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = int(np.sum(sizes))
    gen = np.random.Generator(np.random.PCG64(seed))
    flat_ids = gen.choice(total, size=min(n_coords, total), replace=False)

    analytic = grad_fn(params)
    offsets = np.cumsum([0] + sizes)
    max_err, worst = 0.0, ("", 0)
    for fid in flat_ids:
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = names[which]
        local = int(fid - offsets[which])
        perturbed = {n: a.copy() for n, a in params.items()}
        flat = perturbed[name].reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        f_plus = fn(perturbed)
        flat[local] = orig - h
        f_minus = fn(perturbed)
        fd = (f_plus - f_minus) / (2.0 * h)
        g = float(analytic[name].reshape(-1)[local])
        err = abs(g - fd) / (abs(fd) + 1e-12)
        if err > max_err:
            max_err, worst = err, (name, local)
    return GradCheckReport(
        max_rel_error=max_err,
        n_checked=len(flat_ids),
        tolerance=tolerance,
        passed=max_err <= tolerance,
        worst_coordinate=worst,
    )


def model_grad_check(params: ParamBlocks, tokens: np.ndarray, n_coords: int = 50,
                     h: float = 1e-5, tolerance: float = 1e-6, seed: int = 0,
                     dtype=np.float64) -> GradCheckReport:
    """Finite-difference check of the full model backward pass."""
    config = params.config

    def fn(mapping):
        return forward_loss(blocks_from_named(config, mapping), tokens, dtype=dtype)

    def grad_fn(mapping):
        _, grads = backward(blocks_from_named(config, mapping), tokens, dtype=dtype)
        return grads.as_dict()

    base = {name: arr.astype(dtype) for name, arr in params.named()}
    return grad_check(fn, grad_fn, base, n_coords, h, tolerance, seed=seed)
