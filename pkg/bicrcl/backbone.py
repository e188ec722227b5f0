"""
Backbone Module
Frozen feature extractor with bottleneck adapters and adapter-only backprop

Desk-scale stand-in for a pretrained ViT:
- Frozen linear stem (D -> k)
- Residual MLP blocks x -> x + MLP(x), each with a parallel adapter
  ReLU(x W_down) W_up inserted next to the MLP
- Frozen linear projection to the embedding (k -> d)

Only adapter parameters ever receive gradients. The frozen weights are stored
as read-only arrays and can be saved/loaded in the CRCLBK1 binary format.
Precomputed embeddings from an external extractor use the CRCLEM1 format.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import InvalidInputError, ParseError, ShapeError, TraceError
from .numerics import as_float_array

BACKBONE_MAGIC = b"CRCLBK1"
EMBEDDING_MAGIC = b"CRCLEM1"
ADAPTER_INIT_STD = 0.02


@dataclass
class BackboneConfig:
    """Dimensions and seed of the frozen backbone"""

    input_dim: int = 784
    hidden_dim: int = 128
    embed_dim: int = 64
    num_blocks: int = 2
    adapter_dim: int = 64
    seed: int = 0
    weights_path: str = ""

    def violations(self, prefix: str = "BackboneConfig") -> List[str]:
        errors = []
        for name in ("input_dim", "hidden_dim", "embed_dim", "num_blocks", "adapter_dim"):
            if getattr(self, name) < 1:
                errors.append(f"{prefix}.{name}: must be >= 1, got {getattr(self, name)}")
        if self.adapter_dim >= self.hidden_dim:
            errors.append(
                f"{prefix}.adapter_dim: bottleneck must be smaller than hidden_dim "
                f"({self.adapter_dim} >= {self.hidden_dim})"
            )
        if not 0 <= self.seed < 2 ** 64:
            errors.append(f"{prefix}.seed: must be a 64-bit unsigned integer, got {self.seed}")
        return errors


@dataclass(frozen=True)
class FrozenBlock:
    """One residual MLP block (weights read-only)"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    def mlp(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (MLP output, hidden pre-activation)"""
        pre = x @ self.w1 + self.b1
        return np.maximum(pre, 0.0) @ self.w2 + self.b2, pre

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x + self.mlp(x)[0]


@dataclass
class Adapter:
    """Bottleneck adapter: ReLU(x W_down) W_up"""

    w_down: np.ndarray
    w_up: np.ndarray

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]


class AdapterSet:
    """
    One adapter per backbone block, indexed by block

    The version counter is bumped on every in-place update so that a
    ForwardTrace recorded before the update is detected as stale.
    """

    def __init__(self, adapters: List[Adapter]):
        self.adapters = list(adapters)
        self.version = 0

    @classmethod
    def initialize(cls, num_blocks: int, hidden_dim: int, adapter_dim: int,
                   rng: np.random.Generator, std: float = ADAPTER_INIT_STD) -> "AdapterSet":
        """
        Create fresh adapters: W_down ~ N(0, std^2), W_up = 0

        Args:
            num_blocks: Number of backbone blocks
            hidden_dim: Block width k
            adapter_dim: Bottleneck width k_hat (< k)
            rng: Random generator
            std: Standard deviation of W_down

        Returns:
            AdapterSet whose contribution is exactly zero
        """
        if adapter_dim >= hidden_dim:
            raise InvalidInputError(
                f"adapter bottleneck {adapter_dim} must be smaller than block width {hidden_dim}")
        adapters = [
            Adapter(
                w_down=rng.normal(0.0, std, size=(hidden_dim, adapter_dim)),
                w_up=np.zeros((adapter_dim, hidden_dim)),
            )
            for _ in range(num_blocks)
        ]
        return cls(adapters)

    @classmethod
    def zeros_like(cls, other: "AdapterSet") -> "AdapterSet":
        return cls([Adapter(np.zeros_like(a.w_down), np.zeros_like(a.w_up)) for a in other])

    def copy(self) -> "AdapterSet":
        """Deep copy (no shared arrays)"""
        return AdapterSet([Adapter(a.w_down.copy(), a.w_up.copy()) for a in self.adapters])

    def parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Yield (name, array) for every trainable array"""
        for index, adapter in enumerate(self.adapters):
            yield f"block{index}.w_down", adapter.w_down
            yield f"block{index}.w_up", adapter.w_up

    def mark_updated(self):
        self.version += 1

    def same_shape(self, other: "AdapterSet") -> bool:
        if len(self) != len(other):
            return False
        return all(a.w_down.shape == b.w_down.shape and a.w_up.shape == b.w_up.shape
                   for a, b in zip(self, other))

    def max_abs_diff(self, other: "AdapterSet") -> float:
        return max((float(np.max(np.abs(p - q)))
                    for (_, p), (_, q) in zip(self.parameters(), other.parameters())),
                   default=0.0)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for _, array in self.parameters():
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self) -> Iterator[Adapter]:
        return iter(self.adapters)

    def __getitem__(self, index: int) -> Adapter:
        return self.adapters[index]


@dataclass
class BlockCache:
    """Intermediates of one block needed by the backward pass"""

    x_in: np.ndarray
    mlp_pre: np.ndarray
    adapter_pre: Optional[np.ndarray] = None
    adapter_act: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    """Cached forward intermediates for backward_adapters"""

    batch_size: int
    blocks: List[BlockCache] = field(default_factory=list)
    adapters: Optional[AdapterSet] = None
    adapters_version: int = -1

    def relu_pattern(self) -> np.ndarray:
        """Concatenated ReLU on/off pattern of every cached pre-activation"""
        parts = []
        for cache in self.blocks:
            parts.append((cache.mlp_pre > 0).ravel())
            if cache.adapter_pre is not None:
                parts.append((cache.adapter_pre > 0).ravel())
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def adapter_block_forward(x_in: np.ndarray, block: FrozenBlock,
                          adapter: Optional[Adapter]) -> np.ndarray:
    """
    Adapter-augmented block: block(x) + ReLU(x W_down) W_up

    Args:
        x_in: Activation batch (N x k)
        block: Frozen residual block
        adapter: Adapter for this block (None = frozen path only)

    Returns:
        Output activation batch (N x k)
    """
    return _block_forward(x_in, block, adapter)[0]


def _block_forward(x_in: np.ndarray, block: FrozenBlock,
                   adapter: Optional[Adapter]) -> Tuple[np.ndarray, BlockCache]:
    if x_in.ndim != 2 or x_in.shape[1] != block.width:
        raise ShapeError(f"block expects width {block.width}, got shape {x_in.shape}")

    mlp_out, mlp_pre = block.mlp(x_in)
    out = x_in + mlp_out
    cache = BlockCache(x_in=x_in, mlp_pre=mlp_pre)

    if adapter is not None:
        if adapter.w_down.shape[0] != block.width:
            raise ShapeError(
                f"adapter expects width {adapter.w_down.shape[0]}, block has {block.width}")
        adapter_pre = x_in @ adapter.w_down
        adapter_act = np.maximum(adapter_pre, 0.0)
        # frozen path first so a zero W_up leaves it bit-identical
        out = out + adapter_act @ adapter.w_up
        cache.adapter_pre = adapter_pre
        cache.adapter_act = adapter_act

    return out, cache


class FrozenBackbone:
    """
    Frozen residual-MLP feature extractor phi: R^D -> R^d
    """

    def __init__(self, stem_w: np.ndarray, stem_b: np.ndarray, blocks: List[FrozenBlock],
                 head_w: np.ndarray, head_b: np.ndarray):
        self.stem_w = _freeze(stem_w)
        self.stem_b = _freeze(stem_b)
        self.blocks = [FrozenBlock(*(_freeze(a) for a in (b.w1, b.b1, b.w2, b.b2)))
                       for b in blocks]
        self.head_w = _freeze(head_w)
        self.head_b = _freeze(head_b)

    @classmethod
    def from_config(cls, config: BackboneConfig) -> "FrozenBackbone":
        """
        Build the backbone: load weights_path if set, else seeded random init

        Args:
            config: Backbone configuration

        Returns:
            FrozenBackbone (same seed -> bit-identical weights)
        """
        if config.weights_path:
            backbone = cls.load(config.weights_path)
            dims = (backbone.input_dim, backbone.hidden_dim, backbone.embed_dim,
                    backbone.num_blocks)
            expected = (config.input_dim, config.hidden_dim, config.embed_dim, config.num_blocks)
            if dims != expected:
                raise ShapeError(f"weights file dims {dims} do not match config {expected}")
            return backbone

        rng = np.random.default_rng(config.seed)
        k = config.hidden_dim
        stem_w = rng.normal(0.0, 1.0 / np.sqrt(config.input_dim), size=(config.input_dim, k))
        stem_b = 0.01 * rng.standard_normal(k)
        blocks = []
        for _ in range(config.num_blocks):
            blocks.append(FrozenBlock(
                w1=rng.normal(0.0, np.sqrt(2.0 / k), size=(k, k)),
                b1=0.01 * rng.standard_normal(k),
                w2=rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, k)),
                b2=0.01 * rng.standard_normal(k),
            ))
        head_w = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, config.embed_dim))
        head_b = 0.01 * rng.standard_normal(config.embed_dim)
        return cls(stem_w, stem_b, blocks, head_w, head_b)

    @property
    def input_dim(self) -> int:
        return self.stem_w.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.stem_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.head_w.shape[1]

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def init_adapters(self, adapter_dim: int, rng: np.random.Generator) -> AdapterSet:
        return AdapterSet.initialize(self.num_blocks, self.hidden_dim, adapter_dim, rng)

    def embed(self, x, adapters: Optional[AdapterSet] = None) -> Tuple[np.ndarray, ForwardTrace]:
        """
        Compute embeddings for an input batch

        Args:
            x: Input batch (N x D)
            adapters: AdapterSet matching the blocks (None = adapter-free)

        Returns:
            (embeddings N x d, ForwardTrace for backward_adapters)
        """
        x = as_float_array(x, "input batch", ndim=2)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"input width must be {self.input_dim}, got {x.shape[1]}")
        if adapters is not None and len(adapters) != self.num_blocks:
            raise ShapeError(
                f"AdapterSet has {len(adapters)} adapters, backbone has {self.num_blocks} blocks")

        trace = ForwardTrace(batch_size=x.shape[0], adapters=adapters,
                             adapters_version=adapters.version if adapters is not None else -1)
        hidden = x @ self.stem_w + self.stem_b
        for index, block in enumerate(self.blocks):
            adapter = adapters[index] if adapters is not None else None
            hidden, cache = _block_forward(hidden, block, adapter)
            trace.blocks.append(cache)

        return hidden @ self.head_w + self.head_b, trace

    def embed_batched(self, x, adapters: Optional[AdapterSet] = None,
                      batch_size: int = 512) -> np.ndarray:
        """Embeddings only, computed in chunks (no trace kept)"""
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return np.zeros((0, self.embed_dim))
        chunks = [self.embed(x[start:start + batch_size], adapters)[0]
                  for start in range(0, len(x), batch_size)]
        return np.concatenate(chunks, axis=0)

    def backward_adapters(self, trace: ForwardTrace, grad_embedding) -> AdapterSet:
        """
        Backpropagate an embedding gradient to the adapter parameters

        Frozen weights have no gradient slots; only W_down/W_up gradients
        are produced.

        Args:
            trace: Trace from the matching embed call
            grad_embedding: dLoss/dEmbedding (N x d)

        Returns:
            AdapterSet-shaped gradients
        """
        adapters = trace.adapters
        if adapters is None:
            raise TraceError("trace was recorded without adapters")
        if adapters.version != trace.adapters_version:
            raise TraceError(
                f"stale trace: adapters updated since forward "
                f"(version {trace.adapters_version} -> {adapters.version})")
        if len(trace.blocks) != self.num_blocks:
            raise TraceError("trace does not belong to this backbone")

        grad = as_float_array(grad_embedding, "grad_embedding", ndim=2)
        if grad.shape != (trace.batch_size, self.embed_dim):
            raise TraceError(
                f"gradient shape {grad.shape} does not match trace "
                f"({trace.batch_size}, {self.embed_dim})")

        grads = AdapterSet.zeros_like(adapters)
        grad_hidden = grad @ self.head_w.T

        for index in reversed(range(self.num_blocks)):
            block, cache, adapter = self.blocks[index], trace.blocks[index], adapters[index]

            grad_up = cache.adapter_act.T @ grad_hidden
            grad_adapter_pre = (grad_hidden @ adapter.w_up.T) * (cache.adapter_pre > 0)
            grads[index].w_up[...] = grad_up
            grads[index].w_down[...] = cache.x_in.T @ grad_adapter_pre

            grad_mlp_pre = (grad_hidden @ block.w2.T) * (cache.mlp_pre > 0)
            grad_hidden = (grad_hidden
                           + grad_mlp_pre @ block.w1.T
                           + grad_adapter_pre @ adapter.w_down.T)

        return grads

    def arrays(self) -> List[np.ndarray]:
        """All frozen arrays in file order"""
        arrays = [self.stem_w, self.stem_b]
        for block in self.blocks:
            arrays.extend([block.w1, block.b1, block.w2, block.b2])
        arrays.extend([self.head_w, self.head_b])
        return arrays

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for array in self.arrays():
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def save(self, path: str):
        """Write weights in CRCLBK1 format (little-endian float64)"""
        dims = np.array([self.input_dim, self.hidden_dim, self.embed_dim, self.num_blocks],
                        dtype="<i8")
        with open(path, "wb") as handle:
            handle.write(BACKBONE_MAGIC)
            handle.write(dims.tobytes())
            for array in self.arrays():
                handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "FrozenBackbone":
        """Read weights written by save()"""
        with open(path, "rb") as handle:
            payload = handle.read()
        if payload[:len(BACKBONE_MAGIC)] != BACKBONE_MAGIC:
            raise ParseError("not a CRCLBK1 backbone file", path=path, offset=0)

        offset = len(BACKBONE_MAGIC)
        if len(payload) < offset + 32:
            raise ParseError("truncated backbone header", path=path, offset=offset)
        input_dim, hidden_dim, embed_dim, num_blocks = (
            int(v) for v in np.frombuffer(payload, dtype="<i8", count=4, offset=offset))
        offset += 32

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            if len(payload) < offset + 8 * count:
                raise ParseError("truncated backbone weights", path=path, offset=offset)
            array = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            return array.reshape(shape).astype(np.float64)

        stem_w, stem_b = take((input_dim, hidden_dim)), take((hidden_dim,))
        blocks = [FrozenBlock(take((hidden_dim, hidden_dim)), take((hidden_dim,)),
                              take((hidden_dim, hidden_dim)), take((hidden_dim,)))
                  for _ in range(num_blocks)]
        head_w, head_b = take((hidden_dim, embed_dim)), take((embed_dim,))
        if offset != len(payload):
            raise ParseError("trailing bytes after backbone weights", path=path, offset=offset)
        return cls(stem_w, stem_b, blocks, head_w, head_b)


def write_embeddings(path: str, embeddings: np.ndarray):
    """Write a CRCLEM1 embedding file (rows = samples)"""
    embeddings = as_float_array(embeddings, "embeddings", ndim=2)
    with open(path, "wb") as handle:
        handle.write(EMBEDDING_MAGIC)
        handle.write(np.array(embeddings.shape, dtype="<i8").tobytes())
        handle.write(np.ascontiguousarray(embeddings, dtype="<f8").tobytes())


def read_embeddings(path: str) -> np.ndarray:
    """Read a CRCLEM1 embedding file"""
    with open(path, "rb") as handle:
        payload = handle.read()
    if payload[:len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise ParseError("not a CRCLEM1 embedding file", path=path, offset=0)
    offset = len(EMBEDDING_MAGIC)
    if len(payload) < offset + 16:
        raise ParseError("truncated embedding header", path=path, offset=offset)
    rows, cols = (int(v) for v in np.frombuffer(payload, dtype="<i8", count=2, offset=offset))
    offset += 16
    if len(payload) != offset + 8 * rows * cols:
        raise ParseError(f"expected {rows}x{cols} float64 values", path=path, offset=offset)
    return np.frombuffer(payload, dtype="<f8", offset=offset).reshape(rows, cols).astype(np.float64)


def _freeze(array) -> np.ndarray:
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.setflags(write=False)
    return frozen
