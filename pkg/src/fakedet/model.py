"""Full detector assembly: frozen backbone + attention tower + mobile blocks.

Two branches meet at the classification head. The raw image feeds the
attention tower; the backbone output runs through the inverted-residual
blocks. Both branches end in a global average pool and the pooled vectors
are concatenated into a single-logit dense head (sigmoid, threshold 0.5).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Parameter, Tape, Var
from .attention import AttentionTower, AttentionTowerConfig, tower_widths
from .errors import ConfigError, ShapeError
from .mobile_block import InvertedResidual
from .nn import BatchNorm, Dense, SeparableConv

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 128)
    strides: tuple = (2, 2, 2, 1)


@dataclass
class DetectorConfig:
    stages: int = 3
    n_blocks: int = 4
    bottleneck: int = 8
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_init: str = "zeros"
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99
    attention_branch: bool = True
    precision: str = "f32"


class ToyBackbone:
    """Stand-in feature extractor: separable conv stages ending at 8x8.

    Plays the role of an externally pre-trained network, so it is the part
    the detector freezes during fine-tuning.
    """

    def __init__(self, name, cfg: BackboneConfig, rng, dtype, bn_eps=1e-3, bn_momentum=0.99):
        if len(cfg.widths) != len(cfg.strides) or not cfg.widths:
            raise ConfigError("backbone widths and strides must be equal-length, non-empty")
        self.cfg = cfg
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.stages = []
        c_in = 3
        for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
            stage = f"{name}.stage{i + 1}"
            self.stages.append(
                (
                    SeparableConv(f"{stage}.conv", c_in, width, rng, dtype),
                    BatchNorm(f"{stage}.bn", width, dtype, bn_eps, bn_momentum),
                    stride,
                )
            )
            c_in = width

    @property
    def out_channels(self):
        return self.cfg.widths[-1]

    def apply(self, x: Var, mode):
        for conv, bn, stride in self.stages:
            x = ag.relu(bn.apply(conv.apply(x, stride=stride), mode))
        return x

    def set_trainable(self, flag):
        for conv, bn, _ in self.stages:
            for p in conv.parameters():
                p.trainable = flag
            bn.gamma.trainable = flag
            bn.beta.trainable = flag

    def parameters(self):
        for conv, bn, _ in self.stages:
            yield from conv.parameters()
            yield from bn.parameters()


class _ScoringModel:
    """Shared inference surface: batched logits and fake probabilities."""

    def logits(self, batch, mode="infer"):
        out = self.logits_var(batch, mode)
        out.tape.release()  # inference never sweeps the tape
        return out.value

    def predict_proba(self, images, batch_size=64):
        """Fake probability per image; accepts one image or a batch."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        chunks = [
            ops.sigmoid(self.logits(images[i : i + batch_size]))[:, 0]
            for i in range(0, len(images), batch_size)
        ]
        probs = np.concatenate(chunks)
        return float(probs[0]) if single else probs

    def _as_batch(self, batch):
        batch = np.ascontiguousarray(batch, dtype=self.dtype)
        if batch.ndim != 4 or batch.shape[3] != 3:
            raise ShapeError(f"expected a (n, h, w, 3) batch, got {batch.shape}")
        return batch


class FakeImageDetector(_ScoringModel):
    """Assembled binary classifier; see :func:`assemble`."""

    def __init__(self, cfg: DetectorConfig, seed):
        self.cfg = cfg
        self.seed = seed
        self.precision = cfg.precision
        self.dtype = DTYPES[cfg.precision]
        rng = np.random.default_rng([seed, 0])

        self.backbone = ToyBackbone("backbone", cfg.backbone, rng, self.dtype, cfg.bn_eps, cfg.bn_momentum)
        tower_cfg = AttentionTowerConfig(tower_widths(cfg.stages), cfg.bottleneck)
        self.tower = None
        if cfg.attention_branch:
            self.tower = AttentionTower("tower", tower_cfg, 3, rng, self.dtype, cfg.bn_eps, cfg.bn_momentum)
        self.tower_features = tower_cfg.out_channels
        self.blocks = []
        c_in = self.backbone.out_channels
        for i in range(cfg.n_blocks):
            self.blocks.append(
                InvertedResidual(
                    f"block{i + 1}",
                    c_in,
                    rng,
                    self.dtype,
                    stride=1,
                    bn_eps=cfg.bn_eps,
                    bn_momentum=cfg.bn_momentum,
                )
            )
            c_in = 128
        self.head = Dense("head", self.tower_features + 128, 1, rng, self.dtype, init=cfg.head_init)
        self.backbone_frozen = False

    # -- parameter bookkeeping ------------------------------------------------

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def branch_parameters(self):
        """Parameters of the trainable side: tower, blocks, head."""
        out = []
        if self.tower is not None:
            out.extend(self.tower.parameters())
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend(self.head.parameters())
        return out

    def parameters(self):
        return self.backbone_parameters() + self.branch_parameters()

    def param_map(self):
        return {p.name: p for p in self.parameters()}

    def backbone_param_total(self):
        return sum(p.value.size for p in self.backbone_parameters())

    def trainable_param_total(self):
        """Module-level arithmetic: every tensor of the trainable modules,
        including the BN moving statistics (4 per channel)."""
        return sum(p.value.size for p in self.branch_parameters())

    # -- forward paths ---------------------------------------------------------

    def logits_var(self, batch, mode="infer"):
        """Record a forward pass; returns the (n, 1) logit Var."""
        batch = self._as_batch(batch)
        tape = Tape()
        x = tape.constant(batch)
        n = batch.shape[0]

        feat = self.backbone.apply(x, mode)
        for block in self.blocks:
            feat = block.apply(feat, mode)
        pooled = ag.global_avg_pool(feat)

        if self.tower is not None:
            tower_feat = self.tower.apply(x, mode)
        else:
            tower_feat = tape.constant(np.zeros((n, 1, 1, self.tower_features), dtype=self.dtype))

        joint = ag.concat_channels(tower_feat, pooled)
        return ag.reshape(self.head.apply(joint), (n, 1))


class BackbonePretrainNet(_ScoringModel):
    """Backbone plus a throwaway pooled dense head, used only to pretrain
    the stand-in backbone before its weights are saved and frozen."""

    def __init__(self, backbone_cfg: BackboneConfig = None, seed=0, precision="f32", bn_eps=1e-3, bn_momentum=0.99):
        self.precision = precision
        self.dtype = DTYPES[precision]
        rng = np.random.default_rng([seed, 0])
        self.backbone = ToyBackbone("backbone", backbone_cfg or BackboneConfig(), rng, self.dtype, bn_eps, bn_momentum)
        self.head = Dense("pretrain_head", self.backbone.out_channels, 1, rng, self.dtype, init="he")

    def logits_var(self, batch, mode="infer"):
        batch = self._as_batch(batch)
        tape = Tape()
        x = tape.constant(batch)
        pooled = ag.global_avg_pool(self.backbone.apply(x, mode))
        return ag.reshape(self.head.apply(pooled), (batch.shape[0], 1))

    def parameters(self):
        return list(self.backbone.parameters()) + list(self.head.parameters())


def assemble(
    stages=3,
    n_blocks=4,
    seed=0,
    precision="f32",
    bottleneck=8,
    backbone_cfg=None,
    head_init="zeros",
    attention_branch=True,
    bn_eps=1e-3,
    bn_momentum=0.99,
):
    """Build a detector with deterministic seed-keyed initialization.

    Conv and dense weights are He-uniform (fan-in); biases, attention gates
    and the default head start at zero, so a fresh model outputs probability
    0.5 for every input. The backbone starts frozen.
    """
    if stages < 1:
        raise ConfigError(f"need at least one attention stage, got {stages}")
    if n_blocks < 1:
        raise ConfigError(f"need at least one fine-tuning block, got {n_blocks}")
    if precision not in DTYPES:
        raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}")
    cfg = DetectorConfig(
        stages=stages,
        n_blocks=n_blocks,
        bottleneck=bottleneck,
        backbone=backbone_cfg or BackboneConfig(),
        head_init=head_init,
        bn_eps=bn_eps,
        bn_momentum=bn_momentum,
        attention_branch=attention_branch,
        precision=precision,
    )
    model = FakeImageDetector(cfg, seed)
    freeze_backbone(model, True)
    return model


def freeze_backbone(model: FakeImageDetector, frozen=True):
    """Set backbone trainability; moving statistics never train. Idempotent."""
    model.backbone.set_trainable(not frozen)
    model.backbone_frozen = frozen


def param_checksum(params):
    """CRC-32 over names and raw values, in order; detects any drift."""
    crc = 0
    for p in params:
        crc = zlib.crc32(p.name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(p.value).tobytes(), crc)
    return crc
