"""A small pre-norm vision classifier whose token mixer is pluggable.

Pipeline: patchify -> linear embed (+ learned position table) -> L pre-norm
blocks -> mean pool -> layer norm -> linear head. Each block is

    z  = mixer(LN1(z)) + z
    z  = MLP(LN2(z)) + z

where the mixer is either the shared-kernel layer from :mod:`lkca.attention`
(code ``L``) or single-head softmax self-attention (code ``M``) for
comparison. There is no class token; classification pools over tokens.

All parameters live in plain numpy arrays addressed by a flat name registry
(``embed.E``, ``block0.mixer.kernel``, ...), which is also the checkpoint
serialization order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention
from . import autodiff as ad
from .attention import LKCAKernel, LKCALayer, ValueProjection
from .tensor import F32, MacCounter, SeededRng, ShapeError

CHECKPOINT_MAGIC = b"LKCA1"

MIXER_LKCA = "L"
MIXER_MHSA = "M"


class CheckpointError(RuntimeError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class ModelConfig:
    image_h: int = 16
    image_w: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 8
    mixers: str = "L"        # one code per block: L shared-kernel, M softmax
    mlp_ratio: int = 2
    num_classes: int = 2
    use_pos_embed: bool = True
    kernel_init: str = "zeros"

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch must be >= 1, got {self.patch}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(f"image {self.image_h}x{self.image_w} is not divisible "
                             f"by patch {self.patch}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.mixers:
            raise ValueError("mixers must name at least one block")
        bad = set(self.mixers) - {MIXER_LKCA, MIXER_MHSA}
        if bad:
            raise ValueError(f"unknown mixer codes {sorted(bad)!r} in {self.mixers!r}")

    @property
    def depth(self) -> int:
        return len(self.mixers)

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class Linear:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class MLPLayer:
    fc1: Linear
    fc2: Linear


@dataclass
class MHSALayer:
    q: Linear
    k: Linear
    v: Linear
    out: Linear


@dataclass
class EncoderBlock:
    ln1: LayerNormParams
    mixer: object  # LKCALayer or MHSALayer
    ln2: LayerNormParams
    mlp: MLPLayer


@dataclass
class VisionModel:
    config: ModelConfig
    embed_weight: np.ndarray            # (patch_dim, dim)
    pos_embed: np.ndarray | None        # (num_patches, dim) or None
    blocks: list = field(default_factory=list)
    final_ln: LayerNormParams = None
    head: Linear = None


def build_model(config: ModelConfig, seed: int = 0, dtype=F32) -> VisionModel:
    """Deterministic init: weights trunc-normal(0, 0.02) drawn in registry
    order from one seeded stream, biases and the mixer kernel zero, layer
    norm at identity."""
    rng = SeededRng(seed)

    def w(*shape):
        return rng.trunc_normal(shape, 0.02, dtype=dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    d = config.dim
    embed_weight = w(config.patch_dim, d)
    pos_embed = w(config.num_patches, d) if config.use_pos_embed else None
    blocks = []
    for code in config.mixers:
        ln1 = LayerNormParams(np.ones(d, dtype=dtype), zeros(d))
        if code == MIXER_LKCA:
            layer = attention.init_layer(config.grid_h, config.grid_w, d, rng,
                                         kernel_init=config.kernel_init, dtype=dtype)
        else:
            layer = MHSALayer(q=Linear(w(d, d), zeros(d)),
                              k=Linear(w(d, d), zeros(d)),
                              v=Linear(w(d, d), zeros(d)),
                              out=Linear(w(d, d), zeros(d)))
        ln2 = LayerNormParams(np.ones(d, dtype=dtype), zeros(d))
        hidden = config.mlp_ratio * d
        mlp = MLPLayer(fc1=Linear(w(d, hidden), zeros(hidden)),
                       fc2=Linear(w(hidden, d), zeros(d)))
        blocks.append(EncoderBlock(ln1, layer, ln2, mlp))
    final_ln = LayerNormParams(np.ones(d, dtype=dtype), zeros(d))
    head = Linear(w(d, config.num_classes), zeros(config.num_classes))
    return VisionModel(config=config, embed_weight=embed_weight, pos_embed=pos_embed,
                       blocks=blocks, final_ln=final_ln, head=head)


def param_registry(model: VisionModel) -> dict:
    """Flat name -> array view of every parameter, in a fixed order that is
    also the checkpoint layout. Names ending .bias/.gamma/.beta are the ones
    excluded from weight decay."""
    params = {"embed.E": model.embed_weight}
    if model.pos_embed is not None:
        params["embed.E_pos"] = model.pos_embed
    for i, block in enumerate(model.blocks):
        p = f"block{i}"
        params[f"{p}.ln1.gamma"] = block.ln1.gamma
        params[f"{p}.ln1.beta"] = block.ln1.beta
        if isinstance(block.mixer, LKCALayer):
            params[f"{p}.mixer.kernel"] = block.mixer.kernel.weights
            params[f"{p}.mixer.value.weight"] = block.mixer.value.weight
            params[f"{p}.mixer.value.bias"] = block.mixer.value.bias
        else:
            for name in ("q", "k", "v", "out"):
                lin = getattr(block.mixer, name)
                params[f"{p}.mixer.{name}.weight"] = lin.weight
                params[f"{p}.mixer.{name}.bias"] = lin.bias
        params[f"{p}.ln2.gamma"] = block.ln2.gamma
        params[f"{p}.ln2.beta"] = block.ln2.beta
        params[f"{p}.mlp.fc1.weight"] = block.mlp.fc1.weight
        params[f"{p}.mlp.fc1.bias"] = block.mlp.fc1.bias
        params[f"{p}.mlp.fc2.weight"] = block.mlp.fc2.weight
        params[f"{p}.mlp.fc2.bias"] = block.mlp.fc2.bias
    params["final_ln.gamma"] = model.final_ln.gamma
    params["final_ln.beta"] = model.final_ln.beta
    params["head.weight"] = model.head.weight
    params["head.bias"] = model.head.bias
    return params


def bind_params(model: VisionModel, params: dict) -> VisionModel:
    """Rebuild the model structure around replacement leaves (other arrays,
    float64 casts, or tape variables). Keys must match the registry exactly."""
    expected = param_registry(model)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    cfg = model.config

    def lin(prefix):
        return Linear(params[f"{prefix}.weight"], params[f"{prefix}.bias"])

    blocks = []
    for i, block in enumerate(model.blocks):
        p = f"block{i}"
        if isinstance(block.mixer, LKCALayer):
            mixer = LKCALayer(
                kernel=LKCAKernel(params[f"{p}.mixer.kernel"], cfg.grid_h, cfg.grid_w),
                value=ValueProjection(params[f"{p}.mixer.value.weight"],
                                      params[f"{p}.mixer.value.bias"]),
                view=block.mixer.view)
        else:
            mixer = MHSALayer(q=lin(f"{p}.mixer.q"), k=lin(f"{p}.mixer.k"),
                              v=lin(f"{p}.mixer.v"), out=lin(f"{p}.mixer.out"))
        blocks.append(EncoderBlock(
            ln1=LayerNormParams(params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"]),
            mixer=mixer,
            ln2=LayerNormParams(params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"]),
            mlp=MLPLayer(fc1=lin(f"{p}.mlp.fc1"), fc2=lin(f"{p}.mlp.fc2"))))
    return VisionModel(
        config=cfg,
        embed_weight=params["embed.E"],
        pos_embed=params.get("embed.E_pos"),
        blocks=blocks,
        final_ln=LayerNormParams(params["final_ln.gamma"], params["final_ln.beta"]),
        head=lin("head"))


def set_mixer_view(model: VisionModel, view: str) -> VisionModel:
    """Same weights, different realization for every shared-kernel block."""
    blocks = [replace(b, mixer=attention.with_view(b.mixer, view))
              if isinstance(b.mixer, LKCALayer) else b
              for b in model.blocks]
    return replace(model, blocks=blocks)


def count_model_params(config: ModelConfig) -> int:
    """Closed form; must agree with the registry sizes exactly."""
    d = config.dim
    total = config.patch_dim * d
    if config.use_pos_embed:
        total += config.num_patches * d
    for code in config.mixers:
        total += 2 * d  # ln1
        if code == MIXER_LKCA:
            total += d * d + d + (2 * config.grid_h - 1) * (2 * config.grid_w - 1)
        else:
            total += 4 * (d * d + d)
        total += 2 * d  # ln2
        hidden = config.mlp_ratio * d
        total += d * hidden + hidden + hidden * d + d
    total += 2 * d  # final norm
    total += d * config.num_classes + config.num_classes
    return total


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(b, H, W[, C]) -> (b, num_patches, patch*patch*C).

    Patches are ordered row-major over the patch grid; within a patch, pixels
    are row-major with the channel index varying fastest.
    """
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ShapeError(f"expected (b, H, W) or (b, H, W, C) images, got {images.shape}")
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = images.reshape(b, gh, patch, gw, patch, c)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, image_h: int, image_w: int,
               patch: int, channels: int = 1) -> np.ndarray:
    """Inverse of :func:`patchify`; returns (b, H, W, C)."""
    b, n, pd = patches.shape
    gh, gw = image_h // patch, image_w // patch
    if n != gh * gw or pd != patch * patch * channels:
        raise ShapeError(f"patch tensor {patches.shape} does not describe a "
                         f"{image_h}x{image_w}x{channels} image with patch {patch}")
    tiles = patches.reshape(b, gh, gw, patch, patch, channels)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, image_h, image_w, channels))


def mlp_forward(x, mlp: MLPLayer, macs: MacCounter | None = None):
    h = ad.add(ad.matmul(x, mlp.fc1.weight, macs), mlp.fc1.bias)
    h = ad.gelu(h)
    return ad.add(ad.matmul(h, mlp.fc2.weight, macs), mlp.fc2.bias)


def mhsa_forward(x, layer: MHSALayer, macs: MacCounter | None = None):
    """Single-head softmax attention with 1/sqrt(d) scaling and an output
    projection."""
    d = layer.q.weight.shape[0]
    q = ad.add(ad.matmul(x, layer.q.weight, macs), layer.q.bias)
    k = ad.add(ad.matmul(x, layer.k.weight, macs), layer.k.bias)
    v = ad.add(ad.matmul(x, layer.v.weight, macs), layer.v.bias)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1)), macs), 1.0 / np.sqrt(d))
    mixed = ad.matmul(ad.softmax_rows(scores), v, macs)
    return ad.add(ad.matmul(mixed, layer.out.weight, macs), layer.out.bias)


def block_forward(z, block: EncoderBlock, macs: MacCounter | None = None):
    h = ad.layer_norm(z, block.ln1.gamma, block.ln1.beta)
    if isinstance(block.mixer, LKCALayer):
        mixed = attention.forward(h, block.mixer, macs)
    else:
        mixed = mhsa_forward(h, block.mixer, macs)
    z = ad.add(mixed, z)
    h = ad.layer_norm(z, block.ln2.gamma, block.ln2.beta)
    return ad.add(mlp_forward(h, block.mlp, macs), z)


def embed(patches, model: VisionModel, macs: MacCounter | None = None):
    z = ad.matmul(patches, model.embed_weight, macs)
    if model.pos_embed is not None:
        z = ad.add(z, model.pos_embed)
    return z


def model_forward(images: np.ndarray, model: VisionModel,
                  macs: MacCounter | None = None):
    """Logits of shape (b, num_classes). `images` is (b, H, W[, C]) in the
    model's input resolution; parameters may be arrays or tape variables."""
    cfg = model.config
    if images.shape[1] != cfg.image_h or images.shape[2] != cfg.image_w:
        raise ShapeError(f"expected {cfg.image_h}x{cfg.image_w} images, "
                         f"got {images.shape}")
    patches = patchify(np.asarray(images), cfg.patch)
    ref_dtype = model.embed_weight.dtype
    if patches.dtype != ref_dtype:
        patches = patches.astype(ref_dtype)
    z = embed(patches, model, macs)
    for block in model.blocks:
        z = block_forward(z, block, macs)
    pooled = ad.mean_axis(z, 1)
    pooled = ad.layer_norm(pooled, model.final_ln.gamma, model.final_ln.beta)
    return ad.add(ad.matmul(pooled, model.head.weight, macs), model.head.bias)


def predict(images: np.ndarray, model: VisionModel) -> np.ndarray:
    return np.argmax(model_forward(images, model), axis=-1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: VisionModel):
    """Magic, then per registry entry: u32 name length, utf-8 name, u32 rank,
    u32 extents, raw little-endian float32 data. All integers little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in param_registry(model).items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, model: VisionModel) -> VisionModel:
    """Read a checkpoint written for the same architecture; any mismatch in
    tensor order, name, or shape fails and names the offending tensor."""
    expected = param_registry(model)
    loaded = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")

        def read_exact(n, what):
            buf = fh.read(n)
            if len(buf) != n:
                raise CheckpointError(f"truncated checkpoint while reading {what}")
            return buf

        for name, arr in expected.items():
            (name_len,) = struct.unpack("<I", read_exact(4, f"name length for {name!r}"))
            got = read_exact(name_len, f"name for {name!r}").decode("utf-8")
            if got != name:
                raise CheckpointError(f"tensor {got!r} where {name!r} was expected")
            (rank,) = struct.unpack("<I", read_exact(4, f"rank of {name!r}"))
            shape = struct.unpack(f"<{rank}I", read_exact(4 * rank, f"shape of {name!r}"))
            if shape != arr.shape:
                raise CheckpointError(f"tensor {name!r} has shape {shape}, "
                                      f"expected {arr.shape}")
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = read_exact(4 * count, f"data of {name!r}")
            loaded[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(arr.dtype)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final tensor")
    return bind_params(model, loaded)
