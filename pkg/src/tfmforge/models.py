"""Model families for displacement-to-traction regression.

Three architectures share one contract: map a displacement field 2 x N x N
(or a batch B x 2 x N x N) to a traction field of the same shape.

* ``UNet``: stem conv, three residual-block + stride-2 downsample stages,
  a residual middle block at N/8 resolution, three upsample stages with skip
  concatenation, and a head conv.
* ``ViT``: patch embedding with learnable positional encodings, a stack of
  (self-attention, MLP) encoder layers, and a three-stage convolutional
  decoder back to the field.
* ``HybridViTUNet``: the U-Net with its middle block replaced by a ViT whose
  tokens are the 1 x 1 spatial columns of the bottleneck feature map.

The ViT-based models optionally condition on a cell-type index: a learned
embedding row is appended as an extra token (no positional encoding), seen by
the encoder but dropped before the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (ConvSpec, NormSpec, ParamSet, conv2d, conv_transpose2d,
                     init_conv, init_embedding, init_linear, init_norm, linear,
                     normalize, upsample_nearest)
from .tensor import Tensor

GROUP_NORM_GROUPS = 8  # clamped to the channel count per layer
HEAD_INIT_GAIN = 0.05  # shrink the output layer init so training starts near zero


@dataclass(frozen=True)
class UNetConfig:
    n: int = 104
    in_channels: int = 2
    out_channels: int = 2
    widths: tuple[int, int, int, int] = (64, 128, 256, 512)

    def __post_init__(self):
        if self.n % 8 != 0:
            raise ValueError(f"N={self.n} must be divisible by 8 (three stride-2 stages)")


@dataclass(frozen=True)
class ViTConfig:
    n: int = 104
    patch: int = 8
    dim: int = 256
    layers: int = 6
    heads: int = 8
    mlp_hidden: int = 1024
    dropout: float = 0.1

    def __post_init__(self):
        if self.n % self.patch != 0:
            raise ValueError(f"patch size {self.patch} must divide N={self.n}")
        if self.dim % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide embed dim {self.dim}")

    @property
    def tokens(self) -> int:
        return (self.n // self.patch) ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class HybridConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    dim: int = 256
    layers: int = 4
    heads: int = 8
    mlp_hidden: int = 1024
    dropout: float = 0.1

    def inner_vit(self) -> ViTConfig:
        # tokens are 1x1 columns of the (N/8)^2 bottleneck grid
        return ViTConfig(n=self.unet.n // 8, patch=1, dim=self.dim,
                         layers=self.layers, heads=self.heads,
                         mlp_hidden=self.mlp_hidden, dropout=self.dropout)


class CellTypeVocabulary:
    """Dense 1-based index map over the supported cell types."""

    names = ("WT", "C2C12", "DMD", "Generic")

    def index_of(self, name: str) -> int:
        return self.names.index(name) + 1

    def check(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if np.any((idx < 1) | (idx > len(self.names))):
            raise ValueError(
                f"cell-type index out of range, valid indices 1..{len(self.names)} "
                f"({', '.join(f'{i + 1}={n}' for i, n in enumerate(self.names))})")
        return idx

    def __len__(self):
        return len(self.names)


# -- shared building blocks ----------------------------------------------


def _norm_spec(channels: int) -> NormSpec:
    return NormSpec("group", groups=min(GROUP_NORM_GROUPS, channels))


def init_residual_block(params: ParamSet, name: str, cin: int, cout: int, rng,
                        dtype=np.float64):
    init_norm(params, f"{name}.norm1", cin, dtype)
    init_conv(params, f"{name}.conv1", ConvSpec(cin, cout, (3, 3), padding=1), rng, dtype)
    init_norm(params, f"{name}.norm2", cout, dtype)
    init_conv(params, f"{name}.conv2", ConvSpec(cout, cout, (3, 3), padding=1), rng, dtype)
    if cin != cout:
        init_conv(params, f"{name}.proj", ConvSpec(cin, cout, (1, 1)), rng, dtype)


def residual_block(x: Tensor, params: ParamSet, name: str, cin: int, cout: int) -> Tensor:
    """y = skip(x) + Conv(GELU(Norm(Conv(GELU(Norm(x)))))), shape-preserving."""
    h = normalize(x, _norm_spec(cin), params[f"{name}.norm1.gamma"], params[f"{name}.norm1.beta"])
    h = conv2d(T.gelu(h), ConvSpec(cin, cout, (3, 3), padding=1),
               params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"])
    h = normalize(h, _norm_spec(cout), params[f"{name}.norm2.gamma"], params[f"{name}.norm2.beta"])
    h = conv2d(T.gelu(h), ConvSpec(cout, cout, (3, 3), padding=1),
               params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"])
    if cin != cout:
        x = conv2d(x, ConvSpec(cin, cout, (1, 1)),
                   params[f"{name}.proj.weight"], params[f"{name}.proj.bias"])
    return x + h


def count_params(params: ParamSet) -> int:
    return params.count()


def _embedding_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of an embedding table (0-based indices), with scatter grad."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._from_op(np.ascontiguousarray(out), (table,), backward)


# -- transformer encoder -------------------------------------------------


def init_encoder(params: ParamSet, prefix: str, cfg: ViTConfig, rng, dtype=np.float64):
    for l in range(cfg.layers):
        base = f"{prefix}enc{l}"
        init_linear(params, f"{base}.msa.wq", cfg.dim, cfg.dim, rng, bias=False, dtype=dtype)
        init_linear(params, f"{base}.msa.wk", cfg.dim, cfg.dim, rng, bias=False, dtype=dtype)
        init_linear(params, f"{base}.msa.wv", cfg.dim, cfg.dim, rng, bias=False, dtype=dtype)
        init_linear(params, f"{base}.msa.wo", cfg.dim, cfg.dim, rng, dtype=dtype)
        init_norm(params, f"{base}.mlp.ln", cfg.dim, dtype)
        init_linear(params, f"{base}.mlp.w1", cfg.dim, cfg.mlp_hidden, rng, dtype=dtype)
        init_linear(params, f"{base}.mlp.w2", cfg.mlp_hidden, cfg.dim, rng, dtype=dtype)


def msa(x: Tensor, params: ParamSet, name: str, cfg: ViTConfig,
        training=False, rng=None) -> Tensor:
    """Multi-head self-attention with residual: y = x + MSA(Dropout(x))."""
    b, k, d = x.shape
    h, dk = cfg.heads, cfg.head_dim
    z = T.dropout(x, cfg.dropout, training, rng)

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, k, h, dk)), (0, 2, 1, 3))

    q = split_heads(linear(z, params[f"{name}.wq.weight"]))
    key = split_heads(linear(z, params[f"{name}.wk.weight"]))
    v = split_heads(linear(z, params[f"{name}.wv.weight"]))
    logits = T.scale(T.matmul(q, T.transpose(key, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    weights = T.softmax(logits, axis=-1)
    heads = T.matmul(weights, v)  # B x h x K x dk
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, k, d))
    out = linear(merged, params[f"{name}.wo.weight"], params[f"{name}.wo.bias"])
    return x + out


def mlp_block(x: Tensor, params: ParamSet, name: str, cfg: ViTConfig,
              training=False, rng=None) -> Tensor:
    """y = x + Dropout(W2(Dropout(GELU(W1 LayerNorm(x) + b1))) + b2)."""
    h = normalize(x, NormSpec("layer"), params[f"{name}.ln.gamma"], params[f"{name}.ln.beta"])
    h = T.gelu(linear(h, params[f"{name}.w1.weight"], params[f"{name}.w1.bias"]))
    h = T.dropout(h, cfg.dropout, training, rng)
    h = linear(h, params[f"{name}.w2.weight"], params[f"{name}.w2.bias"])
    h = T.dropout(h, cfg.dropout, training, rng)
    return x + h


def transformer_encode(z: Tensor, params: ParamSet, prefix: str, cfg: ViTConfig,
                       training=False, rng=None) -> Tensor:
    for l in range(cfg.layers):
        z = msa(z, params, f"{prefix}enc{l}.msa", cfg, training, rng)
        z = mlp_block(z, params, f"{prefix}enc{l}.mlp", cfg, training, rng)
    return z


def attach_cell_type(z: Tensor, idx, table: Tensor,
                     vocab: CellTypeVocabulary) -> Tensor:
    """Append the cell-type embedding row as a final token (no positional enc)."""
    b = z.shape[0]
    indices = vocab.check(idx)
    if indices.size == 1 and b > 1:
        indices = np.repeat(indices, b)
    if indices.size != b:
        raise ValueError(f"got {indices.size} cell-type indices for batch of {b}")
    rows = _embedding_rows(table, indices - 1)  # B x D
    token = T.reshape(rows, (b, 1, z.shape[2]))
    return T.concat([z, token], axis=1)


# -- convolutional decoder ----------------------------------------------


def _decode_factors(patch: int) -> list[int]:
    factors, rem, i = [1, 1, 1], patch, 0
    while rem > 1:
        d = 2 if rem % 2 == 0 else rem
        factors[i % 3] *= d
        rem //= d
        i += 1
    return factors


def _decode_channels(dim: int, out_channels: int) -> list[int]:
    c1 = max(out_channels, dim // 2)
    c2 = max(out_channels, dim // 4)
    return [dim, c1, c2, out_channels]


def init_conv_decoder(params: ParamSet, prefix: str, dim: int, out_channels: int,
                      rng, dtype=np.float64, final_gain: float = 1.0):
    chans = _decode_channels(dim, out_channels)
    for i in range(3):
        init_conv(params, f"{prefix}dec{i}",
                  ConvSpec(chans[i], chans[i + 1], (3, 3), padding=1), rng, dtype,
                  gain=final_gain if i == 2 else 1.0)


def conv_decode(y: Tensor, params: ParamSet, prefix: str, cfg: ViTConfig,
                out_channels: int) -> Tensor:
    """Tokens B x K x D -> field B x C x N x N via three upsampling conv stages."""
    b, k, d = y.shape
    grid = cfg.n // cfg.patch
    if k != grid * grid:
        raise ValueError(f"token count {k} is not the {grid}x{grid} patch grid")
    x = T.transpose(T.reshape(y, (b, grid, grid, d)), (0, 3, 1, 2))
    chans = _decode_channels(d, out_channels)
    for i, factor in enumerate(_decode_factors(cfg.patch)):
        x = upsample_nearest(x, factor)
        x = conv2d(x, ConvSpec(chans[i], chans[i + 1], (3, 3), padding=1),
                   params[f"{prefix}dec{i}.weight"], params[f"{prefix}dec{i}.bias"])
        if i < 2:
            x = T.gelu(x)
    return x


def patchify_embed(u: Tensor, params: ParamSet, prefix: str, cfg: ViTConfig) -> Tensor:
    """Split into patches, flatten, linearly embed, add positional encodings."""
    b, c, n, _ = u.shape
    p, grid = cfg.patch, cfg.n // cfg.patch
    x = T.reshape(u, (b, c, grid, p, grid, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, grid * grid, c * p * p))
    z = linear(x, params[f"{prefix}embed.weight"], params[f"{prefix}embed.bias"])
    pos = T.reshape(params[f"{prefix}pos"], (1, cfg.tokens, cfg.dim))
    return z + T.Tensor._from_op(np.broadcast_to(pos.data, z.shape).copy(), (pos,),
                                 lambda g: (g.sum(axis=0, keepdims=True),))


# -- model classes -------------------------------------------------------


class _Model:
    """Common forward plumbing: batching, optional cell-type argument."""

    vocab: CellTypeVocabulary | None = None
    kind = "model"

    @property
    def kind_full(self) -> str:
        return self.kind

    def _enter(self, u):
        if not isinstance(u, Tensor):
            u = Tensor(np.asarray(u))
        if u.data.ndim == 3:
            return T.reshape(u, (1,) + u.shape), True
        if u.data.ndim == 4:
            return u, False
        raise ValueError(f"expected 2xNxN or Bx2xNxN input, got {u.shape}")

    def _exit(self, y: Tensor, squeeze: bool) -> Tensor:
        return T.reshape(y, y.shape[1:]) if squeeze else y

    def _check_cell_type(self, cell_type):
        if self.vocab is None:
            if cell_type is not None:
                raise ValueError("model was built without a cell-type vocabulary")
        else:
            if cell_type is None:
                raise ValueError("cell-type model needs a cell_type index (1..4)")

    def predict(self, u, cell_type=None) -> np.ndarray:
        """Inference-mode forward returning a plain array."""
        return self.forward(u, cell_type=cell_type, training=False).data


class UNet(_Model):
    kind = "unet"

    def __init__(self, cfg: UNetConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.params = ParamSet()
        self._init_unet_params(rng)

    def _init_unet_params(self, rng):
        cfg, p, dt = self.cfg, self.params, self.dtype
        c1, c2, c3, cm = cfg.widths
        chain = [c1, c2, c3, cm]
        init_conv(p, "stem", ConvSpec(cfg.in_channels, c1, (3, 3), padding=1), rng, dt)
        for i in range(3):
            init_residual_block(p, f"down{i}.rb", chain[i], chain[i], rng, dt)
            init_conv(p, f"down{i}.ds",
                      ConvSpec(chain[i], chain[i + 1], (3, 3), stride=2, padding=1), rng, dt)
        self._init_middle(rng)
        for i in range(3):
            cin = chain[3 - i]
            init_conv(p, f"up{i}.fuse", ConvSpec(2 * cin, cin, (1, 1)), rng, dt)
            init_residual_block(p, f"up{i}.rb", cin, cin, rng, dt)
            init_conv(p, f"up{i}.us",
                      ConvSpec(cin, chain[2 - i], (2, 2), stride=2, transposed=True), rng, dt)
        # small head gain: predictions start near zero, matching the sparse
        # targets, instead of burning early epochs shrinking output scale
        init_conv(p, "head", ConvSpec(c1, cfg.out_channels, (3, 3), padding=1), rng,
                  dt, gain=HEAD_INIT_GAIN)

    def _init_middle(self, rng):
        cm = self.cfg.widths[3]
        init_residual_block(self.params, "mid.rb", cm, cm, rng, self.dtype)

    def _middle(self, x, cell_type, training, rng):
        cm = self.cfg.widths[3]
        return residual_block(x, self.params, "mid.rb", cm, cm)

    def forward(self, u, cell_type=None, training=False, rng=None) -> Tensor:
        self._check_cell_type(cell_type)
        x, squeeze = self._enter(u)
        if x.shape[2] % 8 != 0:
            raise ValueError(f"spatial size {x.shape[2]} not divisible by 8")
        cfg, p = self.cfg, self.params
        c1, c2, c3, cm = cfg.widths
        chain = [c1, c2, c3, cm]
        x = conv2d(x, ConvSpec(cfg.in_channels, c1, (3, 3), padding=1),
                   p["stem.weight"], p["stem.bias"])
        skips = []
        for i in range(3):
            x = residual_block(x, p, f"down{i}.rb", chain[i], chain[i])
            x = conv2d(x, ConvSpec(chain[i], chain[i + 1], (3, 3), stride=2, padding=1),
                       p[f"down{i}.ds.weight"], p[f"down{i}.ds.bias"])
            skips.append(x)
        x = self._middle(x, cell_type, training, rng)
        for i in range(3):
            cin = chain[3 - i]
            x = T.concat([x, skips[2 - i]], axis=1)
            x = conv2d(x, ConvSpec(2 * cin, cin, (1, 1)),
                       p[f"up{i}.fuse.weight"], p[f"up{i}.fuse.bias"])
            x = residual_block(x, p, f"up{i}.rb", cin, cin)
            x = conv_transpose2d(x, ConvSpec(cin, chain[2 - i], (2, 2), stride=2,
                                             transposed=True),
                                 p[f"up{i}.us.weight"], p[f"up{i}.us.bias"])
        x = conv2d(x, ConvSpec(c1, cfg.out_channels, (3, 3), padding=1),
                   p["head.weight"], p["head.bias"])
        return self._exit(x, squeeze)


class ViT(_Model):
    kind = "vit"

    def __init__(self, cfg: ViTConfig, rng, with_cell_type: bool = False,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.vocab = CellTypeVocabulary() if with_cell_type else None
        self.params = ParamSet()
        p = self.params
        init_linear(p, "embed", 2 * cfg.patch ** 2, cfg.dim, rng, dtype=dtype)
        init_embedding(p, "pos", cfg.tokens, cfg.dim, rng, dtype)
        if with_cell_type:
            init_embedding(p, "cell_embed", len(self.vocab), cfg.dim, rng, dtype)
        init_encoder(p, "", cfg, rng, dtype)
        init_conv_decoder(p, "", cfg.dim, 2, rng, dtype,
                          final_gain=HEAD_INIT_GAIN)

    @property
    def kind_full(self):
        return "vit+celltype" if self.vocab else "vit"

    def forward(self, u, cell_type=None, training=False, rng=None) -> Tensor:
        self._check_cell_type(cell_type)
        x, squeeze = self._enter(u)
        cfg, p = self.cfg, self.params
        z = patchify_embed(x, p, "", cfg)
        if self.vocab is not None:
            z = attach_cell_type(z, cell_type, p["cell_embed"], self.vocab)
        z = transformer_encode(z, p, "", cfg, training, rng)
        if self.vocab is not None:
            z = T.narrow(z, 1, 0, cfg.tokens)  # decoder never sees the metadata token
        y = conv_decode(z, p, "", cfg, 2)
        return self._exit(y, squeeze)


class HybridViTUNet(UNet):
    """U-Net whose middle block is a transformer over 1x1 bottleneck tokens."""

    kind = "hybrid"

    def __init__(self, cfg: HybridConfig, rng, with_cell_type: bool = False,
                 dtype=np.float64):
        self.hybrid_cfg = cfg
        self.inner = cfg.inner_vit()
        self.vocab = CellTypeVocabulary() if with_cell_type else None
        self._with_cell_type = with_cell_type
        self._rng_for_init = rng
        super().__init__(cfg.unet, rng, dtype)
        del self._rng_for_init

    @property
    def kind_full(self):
        return "hybrid+celltype" if self.vocab else "hybrid"

    def _init_middle(self, rng):
        p, dt = self.params, self.dtype
        cm = self.cfg.widths[3]
        inner = self.inner
        init_linear(p, "vit.embed", cm, inner.dim, rng, dtype=dt)
        init_embedding(p, "vit.pos", inner.tokens, inner.dim, rng, dt)
        if self._with_cell_type:
            init_embedding(p, "vit.cell_embed", len(self.vocab), inner.dim, rng, dt)
        init_encoder(p, "vit.", inner, rng, dt)
        init_conv_decoder(p, "vit.", inner.dim, cm, rng, dt)

    def _middle(self, x, cell_type, training, rng):
        p, inner = self.params, self.inner
        b, cm, g, _ = x.shape
        tokens = T.transpose(T.reshape(x, (b, cm, g * g)), (0, 2, 1))  # B x K x cm
        z = linear(tokens, p["vit.embed.weight"], p["vit.embed.bias"])
        pos = T.reshape(p["vit.pos"], (1, inner.tokens, inner.dim))
        z = z + Tensor._from_op(np.broadcast_to(pos.data, z.shape).copy(), (pos,),
                                lambda gr: (gr.sum(axis=0, keepdims=True),))
        if self.vocab is not None:
            z = attach_cell_type(z, cell_type, p["vit.cell_embed"], self.vocab)
        z = transformer_encode(z, p, "vit.", inner, training, rng)
        if self.vocab is not None:
            z = T.narrow(z, 1, 0, inner.tokens)
        return conv_decode(z, p, "vit.", inner, cm)


MODEL_KINDS = ("unet", "vit", "hybrid", "vit+celltype", "hybrid+celltype")


def build_model(kind: str, rng, n: int = 104,
                unet_widths=(64, 128, 256, 512),
                vit_patch: int = 8, vit_dim: int = 256, vit_layers: int = 6,
                vit_heads: int = 8, hybrid_dim: int = 256, hybrid_layers: int = 4,
                dropout: float = 0.1, dtype=np.float64):
    """Construct any supported model kind with one entry point."""
    if kind == "unet":
        return UNet(UNetConfig(n=n, widths=tuple(unet_widths)), rng, dtype=dtype)
    if kind in ("vit", "vit+celltype"):
        cfg = ViTConfig(n=n, patch=vit_patch, dim=vit_dim, layers=vit_layers,
                        heads=vit_heads, mlp_hidden=4 * vit_dim, dropout=dropout)
        return ViT(cfg, rng, with_cell_type=kind.endswith("celltype"), dtype=dtype)
    if kind in ("hybrid", "hybrid+celltype"):
        cfg = HybridConfig(unet=UNetConfig(n=n, widths=tuple(unet_widths)),
                           dim=hybrid_dim, layers=hybrid_layers,
                           heads=vit_heads, mlp_hidden=4 * hybrid_dim, dropout=dropout)
        return HybridViTUNet(cfg, rng, with_cell_type=kind.endswith("celltype"),
                             dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
