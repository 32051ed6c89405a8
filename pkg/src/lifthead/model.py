"""The 2D-to-3D lifting head.

Per block, three stages run on interleaved streams: self-attention over the
projected 2D feature patches, self-attention over the output templates
(seeded from joint + output-type embeddings, and fed from the previous
block's decoder output), and cross-attention decoding templates against the
same block's encoded patches. Each stage applies residual add, layer norm,
then ReLU, in that order; the 2D encoder and the decoder end in a 3-layer
FFN while the template stage has none. There is one template row per output
- 24 keypoints, 23 twists, 1 shape row, 48 in all - and the final embedding
is projected row-wise into 24 3D keypoints, 23 unit-norm (cos, sin) twist
pairs and a 10-dim body shape vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import FFNParams, LinearParams, MHAParams
from .tensor import ShapeError, Tensor

TWIST_NORM_FLOOR = 1e-8


class NormalizationDegenerateError(ValueError):
    """A twist projection collapsed to (near) zero length at eval time."""


@dataclass
class HeadConfig:
    """Architectural hyperparameters of the lifting head."""
    L: int = 6                # transformer blocks
    h: int = 8                # attention heads
    d: int = 512              # model width
    n_patches: int = 64       # source tokens (8x8 backbone grid)
    c_in: int = 512           # backbone channels per patch
    dropout: float = 0.1
    n_joints: int = 24
    n_twists: int = 23
    beta_dim: int = 10
    # attention score divisor; defaults to the model-wide width d
    attn_scale_dim: Optional[int] = None
    # template row -> joint embedding wiring: twist j uses joint
    # twist_first_joint + j (the non-root joints); the single shape row
    # anchors to shape_anchor_joint
    twist_first_joint: int = 1
    shape_anchor_joint: int = 0

    def __post_init__(self):
        for name in ("L", "h", "d", "n_patches", "c_in", "n_joints", "n_twists", "beta_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.h != 0:
            raise ValueError(f"width d={self.d} must be divisible by h={self.h} heads")
        if self.n_twists != self.n_joints - 1:
            raise ValueError(
                f"expected one twist per non-root joint, got {self.n_twists} twists "
                f"for {self.n_joints} joints")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.twist_first_joint + self.n_twists > self.n_joints:
            raise ValueError("twist_first_joint maps twists past the last joint")
        if not 0 <= self.shape_anchor_joint < self.n_joints:
            raise ValueError("shape_anchor_joint out of range")

    @property
    def n_templates(self) -> int:
        return self.n_joints + self.n_twists + 1

    @property
    def scale_dim(self) -> int:
        return self.attn_scale_dim if self.attn_scale_dim is not None else self.d


@dataclass
class LayerNormParams:
    gamma: Tensor  # (d,)
    beta: Tensor   # (d,)

    def named(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class Templates:
    """Learnable embeddings seeding both transformer streams."""
    joint_emb: Tensor        # (n_joints, d)
    type_emb: Tensor         # (3, d): keypoint, twist, shape
    pos_enc: Tensor          # (n_patches, d)
    input_proj: LinearParams  # c_in -> d

    def named(self, prefix: str = "templates"):
        yield from self.input_proj.named(f"{prefix}.input_proj")
        yield f"{prefix}.pos_enc", self.pos_enc
        yield f"{prefix}.joint_emb", self.joint_emb
        yield f"{prefix}.type_emb", self.type_emb


@dataclass
class BlockParams:
    """One transformer block: 2D encoder, template encoder (no FFN), decoder."""
    mha_2d: MHAParams
    ln_2d: LayerNormParams
    ffn_2d: FFNParams
    mha_3d: MHAParams
    ln_3d: LayerNormParams
    mha_cross: MHAParams
    ln_cross: LayerNormParams
    ffn_3d: FFNParams

    def named(self, prefix: str):
        yield from self.mha_2d.named(f"{prefix}.mha_2d")
        yield from self.ln_2d.named(f"{prefix}.ln_2d")
        yield from self.ffn_2d.named(f"{prefix}.ffn_2d")
        yield from self.mha_3d.named(f"{prefix}.mha_3d")
        yield from self.ln_3d.named(f"{prefix}.ln_3d")
        yield from self.mha_cross.named(f"{prefix}.mha_cross")
        yield from self.ln_cross.named(f"{prefix}.ln_cross")
        yield from self.ffn_3d.named(f"{prefix}.ffn_3d")


@dataclass
class HeadParams:
    templates: Templates
    blocks: list[BlockParams]
    proj_kpt: LinearParams    # d -> 3
    proj_twist: LinearParams  # d -> 2
    proj_beta: LinearParams   # d -> beta_dim

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.templates.named()
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"blocks.{i}")
        yield from self.proj_kpt.named("proj_kpt")
        yield from self.proj_twist.named("proj_twist")
        yield from self.proj_beta.named("proj_beta")

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()


@dataclass
class PoseOutput:
    """24 3D keypoints, 23 (cos, sin) twist pairs, 10-dim shape vector."""
    keypoints: Tensor  # (n_joints, 3)
    twists: Tensor     # (n_twists, 2), unit-norm rows
    beta: Tensor       # (beta_dim,)


def _init_layer_norm(d: int, dtype) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def _init_embedding(rng: np.random.Generator, rows: int, d: int, dtype) -> Tensor:
    # unit-variance rows after summation would swamp the streams; keep O(1)
    # activations with the usual 1/sqrt(d) embedding scale
    return Tensor((rng.standard_normal((rows, d)) / np.sqrt(d)).astype(dtype),
                  requires_grad=True)


def init_head(cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    """Fresh parameters for every stage; deterministic for a given rng state."""
    templates = Templates(
        joint_emb=_init_embedding(rng, cfg.n_joints, cfg.d, dtype),
        type_emb=_init_embedding(rng, 3, cfg.d, dtype),
        pos_enc=_init_embedding(rng, cfg.n_patches, cfg.d, dtype),
        input_proj=B.init_params(rng, cfg.c_in, cfg.d, dtype),
    )
    blocks = []
    for _ in range(cfg.L):
        blocks.append(BlockParams(
            mha_2d=B.init_mha(rng, cfg.d, cfg.h, cfg.scale_dim, dtype),
            ln_2d=_init_layer_norm(cfg.d, dtype),
            ffn_2d=B.init_ffn(rng, cfg.d, dtype),
            mha_3d=B.init_mha(rng, cfg.d, cfg.h, cfg.scale_dim, dtype),
            ln_3d=_init_layer_norm(cfg.d, dtype),
            mha_cross=B.init_mha(rng, cfg.d, cfg.h, cfg.scale_dim, dtype),
            ln_cross=_init_layer_norm(cfg.d, dtype),
            ffn_3d=B.init_ffn(rng, cfg.d, dtype),
        ))
    return HeadParams(
        templates=templates,
        blocks=blocks,
        proj_kpt=B.init_params(rng, cfg.d, 3, dtype),
        proj_twist=B.init_params(rng, cfg.d, 2, dtype),
        proj_beta=B.init_params(rng, cfg.d, cfg.beta_dim, dtype),
    )


def template_row_indices(cfg: HeadConfig) -> tuple[list[int], list[int]]:
    """(joint index, type index) per template row: keypoints, twists, shape."""
    joints = list(range(cfg.n_joints))
    joints += [cfg.twist_first_joint + j for j in range(cfg.n_twists)]
    joints.append(cfg.shape_anchor_joint)
    types = [0] * cfg.n_joints + [1] * cfg.n_twists + [2]
    return joints, types


def embed_source(features: Tensor, t: Templates,
                 patch_indices: Optional[Sequence[int]] = None) -> Tensor:
    """Project backbone patches to width d and add the position encoding.

    With patch_indices set (training augmentation), only those rows of the
    features and the position encoding participate.
    """
    pos = t.pos_enc
    if patch_indices is not None:
        features = T.gather_rows(features, patch_indices)
        pos = T.gather_rows(pos, patch_indices)
    if features.shape[1] != t.input_proj.weight.shape[0]:
        raise ShapeError(
            f"feature channels {features.shape} do not match input projection "
            f"{t.input_proj.weight.shape}")
    if features.shape[0] != pos.shape[0]:
        raise ShapeError(
            f"patch count {features.shape} does not match position encoding {pos.shape}")
    return T.add(B.linear(t.input_proj, features), pos)


def assemble_templates(t: Templates, cfg: HeadConfig) -> Tensor:
    """n_templates x d matrix: each row is a joint embedding plus its
    output-type embedding (keypoint rows, then twist rows, then the shape
    row)."""
    joints, types = template_row_indices(cfg)
    return T.add(T.gather_rows(t.joint_emb, joints), T.gather_rows(t.type_emb, types))


def _stage(mha_out: Tensor, residual: Tensor, ln: LayerNormParams) -> Tensor:
    return T.relu(T.layer_norm(T.add(mha_out, residual), ln.gamma, ln.beta))


def encode_2d_block(p: BlockParams, e_prev: Tensor, *,
                    dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    a = B.multi_head_attention(p.mha_2d, e_prev, e_prev, e_prev,
                               dropout_p=dropout_p, rng=rng, training=training)
    b = _stage(a, e_prev, p.ln_2d)
    return B.feed_forward(p.ffn_2d, b, dropout_p=dropout_p, rng=rng, training=training)


def encode_templates_block(p: BlockParams, e_prev_3d: Tensor, *,
                           dropout_p: float = 0.0, rng=None,
                           training: bool = False) -> Tensor:
    # this stage has no FFN
    a = B.multi_head_attention(p.mha_3d, e_prev_3d, e_prev_3d, e_prev_3d,
                               dropout_p=dropout_p, rng=rng, training=training)
    return _stage(a, e_prev_3d, p.ln_3d)


def decode_block(p: BlockParams, e_3d_t: Tensor, e_2d: Tensor, *,
                 dropout_p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Cross-attend templates (queries) against this block's encoded patches."""
    a = B.multi_head_attention(p.mha_cross, e_3d_t, e_2d, e_2d,
                               dropout_p=dropout_p, rng=rng, training=training)
    b = _stage(a, e_3d_t, p.ln_cross)
    return B.feed_forward(p.ffn_3d, b, dropout_p=dropout_p, rng=rng, training=training)


def encode_decode(cfg: HeadConfig, params: HeadParams, features: Tensor, *,
                  training: bool = False, rng=None,
                  patch_indices: Optional[Sequence[int]] = None
                  ) -> tuple[Tensor, Tensor]:
    """Run all L blocks; returns the final (patch, template) embeddings.

    The template stream of block l reads the decoder output of block l-1;
    the decoder of block l reads the 2D encoder output of the same block.
    """
    dropout_p = cfg.dropout if training else 0.0
    if dropout_p > 0.0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    kw = dict(dropout_p=dropout_p, rng=rng, training=training)
    e_2d = embed_source(features, params.templates, patch_indices)
    e_3d = assemble_templates(params.templates, cfg)
    for blk in params.blocks:
        e_2d = encode_2d_block(blk, e_2d, **kw)
        e_3d_t = encode_templates_block(blk, e_3d, **kw)
        e_3d = decode_block(blk, e_3d_t, e_2d, **kw)
    return e_2d, e_3d


def project_outputs(e_last: Tensor, proj_kpt: LinearParams, proj_twist: LinearParams,
                    proj_beta: LinearParams, *, n_joints: int = 24,
                    training: bool = False) -> PoseOutput:
    """Row-wise output projections of the final template embedding."""
    n_twists = e_last.shape[0] - n_joints - 1
    kpt = B.linear(proj_kpt, T.slice_rows(e_last, 0, n_joints))
    twist_raw = B.linear(proj_twist, T.slice_rows(e_last, n_joints, n_joints + n_twists))
    if not training:
        norms = np.sqrt((twist_raw.data ** 2).sum(axis=1))
        if (norms < TWIST_NORM_FLOOR).any():
            bad = int(np.argmin(norms))
            raise NormalizationDegenerateError(
                f"twist row {bad} has norm {norms[bad]:.3e} < {TWIST_NORM_FLOOR}")
    twists = T.normalize_rows(twist_raw, eps=TWIST_NORM_FLOOR)
    beta_row = B.linear(proj_beta, T.slice_rows(e_last, n_joints + n_twists,
                                                n_joints + n_twists + 1))
    beta = T.reshape(beta_row, (beta_row.shape[1],))
    return PoseOutput(keypoints=kpt, twists=twists, beta=beta)


def forward(cfg: HeadConfig, params: HeadParams, features: Tensor, *,
            training: bool = False, rng=None,
            patch_indices: Optional[Sequence[int]] = None) -> PoseOutput:
    """Full head: embed, encode/decode L blocks, project outputs."""
    _, e_3d = encode_decode(cfg, params, features, training=training, rng=rng,
                            patch_indices=patch_indices)
    return project_outputs(e_3d, params.proj_kpt, params.proj_twist, params.proj_beta,
                           n_joints=cfg.n_joints, training=training)


def pose_output_from_arrays(keypoints, twists, beta, dtype=np.float32) -> PoseOutput:
    """Wrap plain arrays as a (non-learnable) PoseOutput, e.g. training targets."""
    return PoseOutput(
        keypoints=Tensor(np.asarray(keypoints), dtype=dtype),
        twists=Tensor(np.asarray(twists), dtype=dtype),
        beta=Tensor(np.asarray(beta), dtype=dtype),
    )
