"""Depth-growth operators: enumeration, layer maps, and checkpoint surgery.

An operator takes an L-layer model to an (L+k)-layer model by selecting the
span of k consecutive layers starting at ``start_index``, partitioning it
into k/b consecutive blocks of ``block_size`` layers, and inserting one new
block immediately after each original block. New blocks are either bit-exact
duplicates of the block they follow or freshly initialized layers. Layers
outside the span survive unchanged at shifted positions, as do embeddings,
the final norm, and the output head. Optimizer moments follow the same map.

Indices are 0-based throughout; the feasible start indices for depth L and
grow amount k are {0, ..., L-k}.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, OperatorError
from .model import init_layer
from .optim import remap_state

SCHEME_DUPLICATE = "duplicate"
SCHEME_RANDOM = "random"
SCHEMES = (SCHEME_DUPLICATE, SCHEME_RANDOM)
_SCHEME_TOKEN = {SCHEME_DUPLICATE: "dup", SCHEME_RANDOM: "rand"}
_TOKEN_SCHEME = {v: k for k, v in _SCHEME_TOKEN.items()}


@dataclass(frozen=True, order=True)
class GrowthOperator:
    """One point in the design space: (start index, block size, scheme, grow amount)."""

    start_index: int
    block_size: int
    scheme: str
    grow_amount: int

    def validate(self, num_layers: int | None = None):
        if self.grow_amount < 1:
            raise OperatorError(f"grow_amount must be >= 1, got {self.grow_amount}")
        if self.block_size < 1:
            raise OperatorError(f"block_size must be >= 1, got {self.block_size}")
        if self.grow_amount % self.block_size != 0:
            raise OperatorError(
                f"block_size {self.block_size} must divide grow_amount {self.grow_amount}"
            )
        if self.scheme not in SCHEMES:
            raise OperatorError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.start_index < 0:
            raise OperatorError(f"start_index must be >= 0, got {self.start_index}")
        if num_layers is not None and self.start_index > num_layers - self.grow_amount:
            raise OperatorError(
                f"start_index {self.start_index} infeasible for {num_layers} layers "
                f"with grow_amount {self.grow_amount}; feasible range is "
                f"0..{num_layers - self.grow_amount}"
            )

    def to_string(self) -> str:
        return (
            f"i{self.start_index}-b{self.block_size}-"
            f"{_SCHEME_TOKEN[self.scheme]}-k{self.grow_amount}"
        )


def parse_operator(text: str) -> GrowthOperator:
    """Parse the compact form ``i{i}-b{b}-{dup|rand}-k{k}``."""
    parts = text.strip().split("-")
    if len(parts) != 4 or not parts[0].startswith("i") or not parts[1].startswith("b") \
            or parts[2] not in _TOKEN_SCHEME or not parts[3].startswith("k"):
        raise OperatorError(
            f"cannot parse operator {text!r}; expected i<start>-b<block>-dup|rand-k<grow>"
        )
    try:
        op = GrowthOperator(
            start_index=int(parts[0][1:]),
            block_size=int(parts[1][1:]),
            scheme=_TOKEN_SCHEME[parts[2]],
            grow_amount=int(parts[3][1:]),
        )
    except ValueError as exc:
        raise OperatorError(f"cannot parse operator {text!r}: {exc}") from exc
    op.validate()
    return op


@dataclass(frozen=True)
class MapEntry:
    position: int  # layer index in the grown model
    source: int | None  # old layer index, or None for a fresh random layer
    slot: int | None = None  # ordinal of the random draw; None for carried layers


@dataclass(frozen=True)
class GrowthLayerMap:
    entries: tuple[MapEntry, ...]
    old_num_layers: int
    operator: GrowthOperator

    @property
    def new_num_layers(self) -> int:
        return len(self.entries)

    def render_one_based(self) -> list:
        """Human-readable form: 1-based old-layer numbers, 'R' for random layers."""
        return ["R" if e.source is None else e.source + 1 for e in self.entries]

    def validate(self):
        positions = [e.position for e in self.entries]
        if positions != list(range(len(self.entries))):
            raise OperatorError("layer map positions must be 0..L+k-1 in order")
        if len(self.entries) != self.old_num_layers + self.operator.grow_amount:
            raise OperatorError("layer map length must be old depth + grow amount")
        sources = {e.source for e in self.entries if e.source is not None}
        if sources != set(range(self.old_num_layers)):
            raise OperatorError("every old layer must appear in the layer map")


def layer_map(op: GrowthOperator, num_layers: int) -> GrowthLayerMap:
    """Expand an operator into the explicit new-layer -> source mapping."""
    op.validate(num_layers)
    i, b, k = op.start_index, op.block_size, op.grow_amount
    sources: list[int | None] = list(range(i))
    for block_start in range(i, i + k, b):
        block = list(range(block_start, block_start + b))
        sources.extend(block)
        if op.scheme == SCHEME_DUPLICATE:
            sources.extend(block)
        else:
            sources.extend([None] * b)
    sources.extend(range(i + k, num_layers))

    entries = []
    rand_slot = 0
    for pos, src in enumerate(sources):
        if src is None:
            entries.append(MapEntry(position=pos, source=None, slot=rand_slot))
            rand_slot += 1
        else:
            entries.append(MapEntry(position=pos, source=src))
    out = GrowthLayerMap(entries=tuple(entries), old_num_layers=num_layers, operator=op)
    out.validate()
    return out


@dataclass(frozen=True)
class DesignSpace:
    """Candidate coordinates; enumeration filters out infeasible combinations."""

    indices: tuple[int, ...]
    block_sizes: tuple[int, ...]
    schemes: tuple[str, ...]
    grow_amount: int

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(self.indices))
        object.__setattr__(self, "block_sizes", tuple(self.block_sizes))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown init scheme {s!r}; expected one of {SCHEMES}")
        if self.grow_amount < 1:
            raise ConfigError(f"grow_amount must be >= 1, got {self.grow_amount}")


def enumerate_operators(space: DesignSpace, num_layers: int) -> list[GrowthOperator]:
    """All feasible operators, ordered by (index, block size, duplicate-first)."""
    if num_layers < space.grow_amount:
        raise ConfigError(
            f"cannot grow a {num_layers}-layer model by {space.grow_amount}; "
            "the span of layers to grow would not fit"
        )
    scheme_order = sorted(set(space.schemes), key=SCHEMES.index)
    ops = []
    for i in sorted(set(space.indices)):
        if not 0 <= i <= num_layers - space.grow_amount:
            continue
        for b in sorted(set(space.block_sizes)):
            if b < 1 or space.grow_amount % b != 0:
                continue
            for scheme in scheme_order:
                ops.append(GrowthOperator(i, b, scheme, space.grow_amount))
    if not ops:
        raise ConfigError(
            f"design space is empty for depth {num_layers}: no feasible "
            f"(index, block size) pair with grow_amount {space.grow_amount}"
        )
    return ops


def post_stack_operator(block_size: int, num_layers: int) -> GrowthOperator:
    """The last-stacking operator: duplicate the final b layers on top."""
    if block_size < 1 or block_size > num_layers:
        raise ConfigError(
            f"post-stack block size must lie in 1..{num_layers}, got {block_size}"
        )
    return GrowthOperator(
        start_index=num_layers - block_size,
        block_size=block_size,
        scheme=SCHEME_DUPLICATE,
        grow_amount=block_size,
    )


def _layer_seed(seed: int, slot: int) -> int:
    h = hashlib.blake2b(f"growth-layer:{seed}:{slot}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def apply_growth(ckpt: Checkpoint, op: GrowthOperator, seed: int) -> Checkpoint:
    """Grow a checkpoint in depth; parameters and optimizer moments both follow
    the operator's layer map, and the step counter is preserved.

    Random layers draw from the same distribution as fresh-model init, keyed
    by (seed, slot) so that every candidate in a race sharing the seed gets
    identical fresh-layer draws for the same slot.
    """
    old_l = ckpt.num_layers
    gmap = layer_map(op, old_l)
    new_config = ckpt.params.config.with_layers(old_l + op.grow_amount)

    new_layers = []
    for entry in gmap.entries:
        if entry.source is None:
            gen = np.random.Generator(np.random.PCG64(_layer_seed(seed, entry.slot)))
            new_layers.append(init_layer(new_config, gen))
        else:
            src = ckpt.params.layers[entry.source]
            new_layers.append({k: v.copy() for k, v in src.items()})

    from .model import ParamBlocks

    new_params = ParamBlocks(
        config=new_config,
        embedding={k: v.copy() for k, v in ckpt.params.embedding.items()},
        layers=new_layers,
        final_norm={k: v.copy() for k, v in ckpt.params.final_norm.items()},
        head={k: v.copy() for k, v in ckpt.params.head.items()},
    )
    new_params.validate()
    new_opt = remap_state(ckpt.opt, gmap, old_l)
    return Checkpoint(
        params=new_params,
        opt=new_opt,
        step=ckpt.step,
        seed=ckpt.seed,
        provenance=list(ckpt.provenance) + [op.to_string()],
    )
