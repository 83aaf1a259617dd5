"""The fusion network.

A densely connected convolutional backbone extracts image features,
a projection head pools and compresses them, an MLP embeds the
handcrafted texture features, and a single affine classification head
consumes the concatenation of the two embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Model configuration is internally inconsistent."""


# Composite-layer order inside a dense block; recorded in checkpoints.
LAYER_ORDER = "bn-relu-conv-dropout"


@dataclass
class ModelConfig:
    d_in: int = 92            # width of the merged feature vector
    d_embed: int = 128        # MLP embedding width
    mlp_hidden: int = 1024
    mlp_dropout: float = 0.5
    growth: int = 24          # channels added per dense layer
    blocks: int = 3
    layers_per_block: int = 16
    compression: float = 0.5  # transition channel-keep fraction
    backbone_dropout: float = 0.2
    proj_dim: int = 128
    num_classes: int = 10
    input_side: int = 224

    @property
    def stem_channels(self):
        return 2 * self.growth

    def validate(self):
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], got {self.compression}")
        for name in ("d_in", "d_embed", "mlp_hidden", "growth", "blocks",
                     "layers_per_block", "proj_dim", "num_classes", "input_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.input_side < 2 ** (self.blocks - 1) * 4:
            raise ConfigError(
                f"input side {self.input_side} too small for "
                f"{self.blocks - 1} pooling stages"
            )
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def backbone_channels(cfg):
    """Channel count entering each block and after each transition.

    Returns (per_block_output, per_transition_output, final_channels).
    """
    c = cfg.stem_channels
    block_out, trans_out = [], []
    for b in range(cfg.blocks):
        c = c + cfg.layers_per_block * cfg.growth
        block_out.append(c)
        if b < cfg.blocks - 1:
            c = int(cfg.compression * c)
            trans_out.append(c)
    return block_out, trans_out, c


class Parameters:
    """Named tensors with deterministic iteration order.

    Trainable weights carry requires_grad; batch-norm running stats are
    stored alongside with requires_grad=False.
    """

    def __init__(self, dtype=None):
        self._tensors = {}
        self._dtype = dtype

    def add(self, name, data, trainable=True):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        if self._dtype is not None:
            data = np.asarray(data).astype(self._dtype)
        t = Tensor(data, requires_grad=trainable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).data.dtype

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def copy(self):
        out = Parameters(self._dtype)
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), trainable=t.requires_grad)
        return out


def _he_conv(rng, c_out, c_in, ksize=3):
    std = np.sqrt(2.0 / (c_in * ksize * ksize))
    return rng.normal(0.0, std, size=(c_out, c_in, ksize, ksize))


def _he_linear(rng, d_out, d_in):
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))


def _add_bn(params, prefix, c):
    params.add(f"{prefix}.gamma", np.ones(c))
    params.add(f"{prefix}.beta", np.zeros(c))
    params.add(f"{prefix}.running_mean", np.zeros(c), trainable=False)
    params.add(f"{prefix}.running_var", np.ones(c), trainable=False)


def init_parameters(cfg, seed=0, dtype=np.float64):
    """He-normal weights for everything feeding a ReLU; BN at identity."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = Parameters(dtype)

    p.add("stem.k", _he_conv(rng, cfg.stem_channels, 3))
    p.add("stem.b", np.zeros(cfg.stem_channels))

    c = cfg.stem_channels
    for b in range(cfg.blocks):
        for l in range(cfg.layers_per_block):
            prefix = f"block{b}.layer{l}"
            c_in = c + l * cfg.growth
            _add_bn(p, f"{prefix}.bn", c_in)
            p.add(f"{prefix}.conv.k", _he_conv(rng, cfg.growth, c_in))
            p.add(f"{prefix}.conv.b", np.zeros(cfg.growth))
        c = c + cfg.layers_per_block * cfg.growth
        if b < cfg.blocks - 1:
            c_next = int(cfg.compression * c)
            _add_bn(p, f"trans{b}.bn", c)
            p.add(f"trans{b}.conv.w", _he_linear(rng, c_next, c))
            p.add(f"trans{b}.conv.b", np.zeros(c_next))
            c = c_next
    _add_bn(p, "final.bn", c)

    p.add("mlp.w1", _he_linear(rng, cfg.mlp_hidden, cfg.d_in))
    p.add("mlp.b1", np.zeros(cfg.mlp_hidden))
    p.add("mlp.w2", _he_linear(rng, cfg.d_embed, cfg.mlp_hidden))
    p.add("mlp.b2", np.zeros(cfg.d_embed))

    p.add("proj.w", _he_linear(rng, cfg.proj_dim, c))
    p.add("proj.b", np.zeros(cfg.proj_dim))
    _add_bn(p, "proj.bn", cfg.proj_dim)

    p.add("head.w", _he_linear(rng, cfg.num_classes, cfg.proj_dim + cfg.d_embed))
    p.add("head.b", np.zeros(cfg.num_classes))
    return p


def _bn(x, params, prefix, mode):
    return T.batch_norm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"],
        params[f"{prefix}.running_var"],
        mode,
    )


def mlp_forward(x, params, cfg, mode, rng=None):
    """Texture-feature embedding: affine -> ReLU -> dropout -> affine -> dropout."""
    if x.shape[1] != cfg.d_in:
        raise T.DimensionError(
            f"feature width {x.shape[1]} does not match configured d_in {cfg.d_in}"
        )
    h1 = T.relu(T.affine(x, params["mlp.w1"], params["mlp.b1"]))
    h2 = T.dropout(h1, cfg.mlp_dropout, mode, rng)
    z = T.affine(h2, params["mlp.w2"], params["mlp.b2"])
    return T.dropout(z, cfg.mlp_dropout, mode, rng)


def dense_layer_forward(x_cat, params, prefix, cfg, mode, rng=None):
    """One composite layer: BN -> ReLU -> 3x3 conv -> dropout."""
    h = T.relu(_bn(x_cat, params, f"{prefix}.bn", mode))
    h = T.conv2d(h, params[f"{prefix}.conv.k"], params[f"{prefix}.conv.b"])
    return T.dropout(h, cfg.backbone_dropout, mode, rng)


def dense_block_forward(x0, params, block_idx, cfg, mode, rng=None):
    """Each layer consumes the concatenation of all previous outputs."""
    features = [x0]
    for l in range(cfg.layers_per_block):
        x_cat = features[0] if len(features) == 1 else T.concat_channels(features)
        features.append(
            dense_layer_forward(x_cat, params, f"block{block_idx}.layer{l}",
                                cfg, mode, rng)
        )
    return T.concat_channels(features) if len(features) > 1 else features[0]


def transition_forward(x, params, trans_idx, cfg, mode):
    """BN -> ReLU -> 1x1 channel compression -> 2x2 average pooling."""
    h = T.relu(_bn(x, params, f"trans{trans_idx}.bn", mode))
    h = T.conv1x1(h, params[f"trans{trans_idx}.conv.w"],
                  params[f"trans{trans_idx}.conv.b"])
    return T.avg_pool_2x2(h)


def densenet_forward(img, params, cfg, mode, rng=None):
    """Backbone: stem conv, dense blocks with transitions, final BN+ReLU."""
    h = T.conv2d(img, params["stem.k"], params["stem.b"])
    for b in range(cfg.blocks):
        h = dense_block_forward(h, params, b, cfg, mode, rng)
        if b < cfg.blocks - 1:
            h = transition_forward(h, params, b, cfg, mode)
    return T.relu(_bn(h, params, "final.bn", mode))


def projection_forward(z, params, cfg, mode):
    """Global average pooling, affine compression, BN and ReLU."""
    d_total = z.shape[1] * z.shape[2] * z.shape[3]
    if cfg.proj_dim >= d_total:
        import warnings

        warnings.warn(
            f"projection width {cfg.proj_dim} is not small relative to the "
            f"{d_total}-dimensional feature map"
        )
    h = T.global_avg_pool(z)
    h = T.affine(h, params["proj.w"], params["proj.b"])
    return T.relu(_bn(h, params, "proj.bn", mode))


def fuse_and_classify(f_proj, f_mlp, params):
    """Concatenate the two embeddings and apply the affine head."""
    if f_proj.shape[0] != f_mlp.shape[0]:
        raise T.DimensionError(
            f"batch mismatch: {f_proj.shape[0]} vs {f_mlp.shape[0]}"
        )
    combined = T.concat_channels([f_proj, f_mlp])
    return T.affine(combined, params["head.w"], params["head.b"])


def model_forward(img, feats, params, cfg, mode, rng=None):
    """Full fusion forward pass to class logits."""
    f_cnn = densenet_forward(img, params, cfg, mode, rng)
    f_proj = projection_forward(f_cnn, params, cfg, mode)
    f_mlp = mlp_forward(feats, params, cfg, mode, rng)
    return fuse_and_classify(f_proj, f_mlp, params)
