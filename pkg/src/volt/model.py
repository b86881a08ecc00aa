"""Full-model configuration and forward assembly.

Ties tokenizer, encoder, decoder and heads together: a scene batch is
voxelized and patchified per scene, embedded with a shared linear map,
concatenated into one variable-length token batch for the encoder, and
split back per scene for decoding to voxel features.

Presets follow the standard small/base encoder configurations; the tiny
preset exists for tests and desk-scale training runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .decoder_heads import decode, init_decoder_params, init_head_params
from .encoder import EncoderConfig, encoder_forward, init_encoder_params
from .params import ParamStore, truncated_normal
from .rope3d import RopeConfig, default_pairs
from .scene import voxelize
from .tokenizer import TokenBatch, patchify


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter in one place."""

    width: int
    depth: int
    heads: int
    patch_size: int = 5
    in_channels: int = 3
    mlp_ratio: int = 4
    droppath_max: float = 0.0
    qk_norm: bool = True
    rope_pairs: tuple | None = None  # None -> asymmetric default for head_dim
    rope_theta: float = 10000.0
    rope_coordinate_mode: str = "metric_index"
    decoder_mode: str = "light"  # none | light | big
    decoder_width: int | None = None  # None -> width
    dataset_classes: dict = field(default_factory=lambda: {"main": 6})
    distill_classes: int | None = None

    def __post_init__(self):
        if self.decoder_mode not in ("none", "light", "big"):
            raise ValueError(f"unknown decoder mode {self.decoder_mode!r}")
        if self.decoder_mode == "none" and self.decoder_width not in (None, self.width):
            raise ValueError("decoder_width must equal width when no decoder is used")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def effective_decoder_width(self):
        return self.width if self.decoder_width is None else self.decoder_width

    def rope_config(self):
        pairs = self.rope_pairs if self.rope_pairs is not None else default_pairs(self.head_dim)
        return RopeConfig(
            head_dim=self.head_dim,
            pairs_per_axis=tuple(pairs),
            theta_base=self.rope_theta,
            coordinate_mode=self.rope_coordinate_mode,
        )

    def encoder_config(self):
        return EncoderConfig(
            depth=self.depth,
            width=self.width,
            heads=self.heads,
            rope=self.rope_config(),
            mlp_ratio=self.mlp_ratio,
            droppath_max=self.droppath_max,
            qk_norm=self.qk_norm,
        )


_PRESETS = {
    "volt-tiny": dict(width=64, depth=2, heads=2, droppath_max=0.0),
    "volt-s": dict(width=384, depth=12, heads=6, droppath_max=0.3),
    "volt-b": dict(width=768, depth=12, heads=12, droppath_max=0.3),
}


def preset(name, **overrides):
    if name not in _PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def init_params(cfg, seed, dtype=None):
    """Fresh ParamStore for the whole model.

    Linear/conv weights are truncated-normal (std 0.02, hard bound 2*std),
    biases zero, LayerNorm scales one, QKNorm gains sqrt(head_dim).
    """
    from . import runtime

    if dtype is None:
        dtype = runtime.default_dtype()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    p3c = cfg.patch_size**3 * cfg.in_channels
    store.add("embed.w", truncated_normal(rng, (p3c, cfg.width), std=0.02, dtype=dtype))
    store.add("embed.b", np.zeros(cfg.width, dtype=dtype))
    init_encoder_params(store, cfg.encoder_config(), rng, dtype)
    init_decoder_params(
        store, cfg.width, cfg.effective_decoder_width, cfg.patch_size, cfg.decoder_mode, rng, dtype
    )
    init_head_params(
        store, cfg.effective_decoder_width, cfg.dataset_classes, cfg.distill_classes, rng, dtype
    )
    return store


@dataclass
class PreparedScene:
    """A scene after voxelization and patchification, ready to embed."""

    cloud: object
    vset: object
    patches: object


def prepare_scene(cloud, voxel_size, patch_size, voxel_mode="deterministic", rng=None, grid_shift=None):
    vset = voxelize(cloud, voxel_size, mode=voxel_mode, rng=rng)
    return PreparedScene(cloud=cloud, vset=vset, patches=patchify(vset, patch_size, grid_shift))


def embed_batch(store, cfg, prepared):
    """Embed a list of prepared scenes into one concatenated TokenBatch."""
    w, b = store["embed.w"], store["embed.b"]
    tokens, positions, offsets = [], [], [0]
    for scene in prepared:
        dense = ag.Tensor(scene.patches.dense_vectors.astype(w.dtype, copy=False))
        tokens.append(dense @ w + b)
        positions.append(scene.patches.patch_coords)
        offsets.append(offsets[-1] + scene.patches.n_tokens)
    merged = tokens[0] if len(tokens) == 1 else ag.concat(tokens, axis=0)
    return TokenBatch(
        tokens=merged,
        positions=np.concatenate(positions, axis=0),
        segment_offsets=np.asarray(offsets, dtype=np.int64),
    )


def voxel_features(store, cfg, prepared, training=False, rng=None):
    """Run the full backbone; returns one (M_i, D') feature Tensor per scene."""
    batch = embed_batch(store, cfg, prepared)
    encoded = encoder_forward(batch, cfg.encoder_config(), store, training=training, rng=rng)
    feats = []
    offs = encoded.segment_offsets
    for scene, lo, hi in zip(prepared, offs[:-1], offs[1:]):
        scene_tokens = encoded.tokens[int(lo) : int(hi)]
        feats.append(decode(scene_tokens, scene.patches, scene.vset, store, cfg.decoder_mode))
    return feats
