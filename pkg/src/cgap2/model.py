"""The CGAP2 network: per-frame 2D encoder, 3D-convolutional temporal
module, 2D decoder to volumetric heatmaps, and the anticipatory
classifier head.

The encoder and decoder are strictly per-frame 2D; all temporal mixing
happens in the temporal module. Spatial resolutions are tied to the
config: encoder downsamples image_size -> feature_spatial by stride-2
stages, the decoder upsamples feature_spatial -> heatmap_size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor, no_grad

CHECKPOINT_MAGIC = b"CGAP2CKP"
CHECKPOINT_VERSION = 1

STAGES = ("encoder", "temporal", "decoder", "classifier")


class ConfigError(ValueError):
    """Inconsistent model configuration."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    feature_spatial: int = 4
    feature_channels: int = 64
    bottleneck_channels: int = 16
    heatmap_size: int = 16
    num_joints: int = 17
    context_n: int = 5
    gap_g: int = 15
    k_value: int = 1
    num_classes: int = 6
    fc_dims: tuple = (128, 64)
    classifier_conv_channels: int = 32
    temporal_depth: int = 4  # number of 3x3x3 conv blocks in the temporal module

    def __post_init__(self):
        if self.num_joints != 17:
            raise ConfigError("the pose loss fixes the joint count at 17")
        for name, a, b in (("image_size", self.image_size, self.feature_spatial),
                           ("heatmap_size", self.heatmap_size, self.feature_spatial)):
            ratio = a / b
            if a % b or ratio != 2 ** int(math.log2(ratio)):
                raise ConfigError(f"{name} must be feature_spatial times a power of two")
        if self.context_n < self.k_value:
            raise ConfigError("temporal reduction needs context_n >= k_value")
        if self.temporal_depth >= 2 and self.feature_spatial < 2:
            raise ConfigError("spatial pooling needs feature_spatial >= 2")
        if not 1 <= self.temporal_depth <= 5:
            raise ConfigError("temporal_depth must be in 1..5")


def paper_config(**overrides):
    """The dimensions the publication reports (256px frames, 2048-channel
    features, 64^3 heatmaps, 15 classes)."""
    base = dict(image_size=256, feature_spatial=8, feature_channels=2048,
                bottleneck_channels=512, heatmap_size=64, num_classes=15,
                fc_dims=(4096, 2048), classifier_conv_channels=512)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# layers

def _he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2dLayer:
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, zero_init=False):
        k = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        self.stride, self.padding = stride, padding
        if zero_init:
            # heads start at zero so the first predictions are maximally
            # diffuse (uniform soft-argmax) and early gradients stay small
            self.weight = Parameter(np.zeros((c_out, c_in, *k), dtype=np.float32))
        else:
            self.weight = Parameter(_he_init(rng, (c_out, c_in, *k), c_in * k[0] * k[1]))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x):
        return ops.conv2d(x, self.weight.value, self.bias.value,
                          stride=self.stride, padding=self.padding)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


class Conv3dLayer:
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0):
        k = kernel if isinstance(kernel, tuple) else (kernel,) * 3
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_he_init(rng, (c_out, c_in, *k), c_in * k[0] * k[1] * k[2]))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x):
        return ops.conv3d(x, self.weight.value, self.bias.value,
                          stride=self.stride, padding=self.padding)

    named_parameters = Conv2dLayer.named_parameters
    named_buffers = Conv2dLayer.named_buffers


class LinearLayer:
    def __init__(self, rng, f_in, f_out, zero_init=False):
        if zero_init:
            self.weight = Parameter(np.zeros((f_out, f_in), dtype=np.float32))
        else:
            self.weight = Parameter(_he_init(rng, (f_out, f_in), f_in))
        self.bias = Parameter(np.zeros(f_out, dtype=np.float32))

    def forward(self, x):
        return ops.linear(x, self.weight.value, self.bias.value)

    named_parameters = Conv2dLayer.named_parameters
    named_buffers = Conv2dLayer.named_buffers


class BatchNorm3dLayer:
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps, self.momentum = eps, momentum

    def forward(self, x, training):
        return ops.batchnorm3d(x, self.gamma.value, self.beta.value,
                               self.running_mean, self.running_var,
                               mode="train" if training else "eval",
                               eps=self.eps, momentum=self.momentum)

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def _bn2d(layer, x, training):
    """Apply a BatchNorm3dLayer to a 4D [N, C, H, W] tensor."""
    n, c, h, w = x.shape
    return layer.forward(x.reshape(n, c, 1, h, w), training).reshape(n, c, h, w)


class _Stage:
    """Named container of layers; supplies prefixed parameter/buffer walks."""

    def __init__(self):
        self.layers = {}

    def add(self, name, layer):
        self.layers[name] = layer
        return layer

    def named_parameters(self):
        out = []
        for lname, layer in self.layers.items():
            out.extend((f"{lname}.{n}", p) for n, p in layer.named_parameters())
        return out

    def named_buffers(self):
        out = []
        for lname, layer in self.layers.items():
            out.extend((f"{lname}.{n}", b) for n, b in layer.named_buffers())
        return out


# ---------------------------------------------------------------------------
# stages

def _channel_ramp(c_from, c_to, steps):
    """Geometric channel interpolation across ``steps`` layers."""
    if steps == 0:
        return []
    chans = []
    for i in range(1, steps + 1):
        c = c_from * (c_to / c_from) ** (i / steps)
        chans.append(max(1, int(round(c))))
    chans[-1] = c_to
    return chans


class Encoder(_Stage):
    """Per-frame 2D feature extractor: stride-2 conv stages plus one
    residual block at feature resolution."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        stages = int(math.log2(config.image_size // config.feature_spatial))
        chans = _channel_ramp(min(16, config.feature_channels), config.feature_channels, stages)
        c_in = 3
        self.downs = []
        for i, c_out in enumerate(chans):
            self.downs.append((self.add(f"down{i}", Conv2dLayer(rng, c_in, c_out, 3, stride=2, padding=1)),
                               self.add(f"down{i}_bn", BatchNorm3dLayer(c_out))))
            c_in = c_out
        res_c = min(config.feature_channels, 256)
        self.res_a = self.add("res_a", Conv2dLayer(rng, c_in, res_c, 3, padding=1))
        self.res_a_bn = self.add("res_a_bn", BatchNorm3dLayer(res_c))
        self.res_b = self.add("res_b", Conv2dLayer(rng, res_c, c_in, 3, padding=1))
        self.res_b_bn = self.add("res_b_bn", BatchNorm3dLayer(c_in))

    def forward(self, images, training=False):
        if images.shape[1:] != (3, self.config.image_size, self.config.image_size):
            raise ShapeError(f"encoder expects [N, 3, {self.config.image_size}, "
                             f"{self.config.image_size}], got {images.shape}")
        x = images
        for layer, bn in self.downs:
            x = ops.relu(_bn2d(bn, layer.forward(x), training))
        y = ops.relu(_bn2d(self.res_a_bn, self.res_a.forward(x), training))
        return ops.relu(x + _bn2d(self.res_b_bn, self.res_b.forward(y), training))


class TemporalModule(_Stage):
    """3D-conv future-feature predictor: 1x1x1 bottleneck, 3x3x3 conv
    blocks around a spatial pool/norm/upsample, 1x1x1 expansion, then a
    valid conv over the time axis reducing n slices to k."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        f, b = config.feature_channels, config.bottleneck_channels
        depth = config.temporal_depth
        self.bottleneck = self.add("bottleneck", Conv3dLayer(rng, f, b, (1, 1, 1)))
        n_pre = (depth + 1) // 2
        n_post = depth - n_pre
        self.pre = [self.add(f"pre{i}", Conv3dLayer(rng, b, b, 3, padding=1))
                    for i in range(n_pre)]
        self.pooled = depth >= 2
        if self.pooled:
            self.norm = self.add("norm", BatchNorm3dLayer(b))
        self.post = [self.add(f"post{i}", Conv3dLayer(rng, b, b, 3, padding=1))
                     for i in range(n_post)]
        self.expand = self.add("expand", Conv3dLayer(rng, b, f, (1, 1, 1)))
        reduce_k = config.context_n - config.k_value + 1
        self.reduce = self.add("reduce", Conv3dLayer(rng, f, f, (reduce_k, 1, 1)))

    def forward(self, features, training=False):
        cfg = self.config
        expect = (cfg.feature_channels, cfg.context_n, cfg.feature_spatial, cfg.feature_spatial)
        if features.shape[1:] != expect:
            raise ShapeError(f"temporal module expects [N, {expect[0]}, {expect[1]}, "
                             f"{expect[2]}, {expect[3]}], got {features.shape}")
        x = ops.relu(self.bottleneck.forward(features))
        for layer in self.pre:
            x = ops.relu(layer.forward(x))
        if self.pooled:
            x = ops.maxpool3d(x, (1, 2, 2), (1, 2, 2))
            x = self.norm.forward(x, training)
            x = ops.upsample_nearest3d(x, (1, 2, 2))
        for layer in self.post:
            x = ops.relu(layer.forward(x))
        x = ops.relu(self.expand.forward(x))
        return ops.relu(self.reduce.forward(x))


class Decoder(_Stage):
    """2D upsampling stack ending in a 1x1 conv whose channels reshape
    into per-joint heatmap depth."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        stages = int(math.log2(config.heatmap_size // config.feature_spatial))
        c_in = config.feature_channels
        self.base = self.add("base", Conv2dLayer(rng, c_in, c_in, 3, padding=1))
        self.base_bn = self.add("base_bn", BatchNorm3dLayer(c_in))
        self.ups = []
        for i in range(stages):
            c_out = max(32, c_in // 2)
            self.ups.append((self.add(f"up{i}", Conv2dLayer(rng, c_in, c_out, 3, padding=1)),
                             self.add(f"up{i}_bn", BatchNorm3dLayer(c_out))))
            c_in = c_out
        self.head = self.add("head", Conv2dLayer(rng, c_in, config.num_joints * config.heatmap_size,
                                                 1, zero_init=True))

    def forward(self, features, training=False):
        cfg = self.config
        expect = (cfg.feature_channels, cfg.feature_spatial, cfg.feature_spatial)
        if features.shape[1:] != expect:
            raise ShapeError(f"decoder expects [N, {expect[0]}, {expect[1]}, {expect[2]}], "
                             f"got {features.shape}")
        x = ops.relu(_bn2d(self.base_bn, self.base.forward(features), training))
        for layer, bn in self.ups:
            n, c, h, w = x.shape
            x = ops.upsample_nearest3d(x.reshape(n, c, 1, h, w), (1, 2, 2))
            x = x.reshape(n, c, 2 * h, 2 * w)
            x = ops.relu(_bn2d(bn, layer.forward(x), training))
        x = self.head.forward(x)
        n = x.shape[0]
        hd = cfg.heatmap_size
        return x.reshape(n, cfg.num_joints, hd, hd, hd)


class Classifier(_Stage):
    """Shallow anticipatory head: one 3D conv over the concatenated
    historical+predicted feature slices, then three fully connected layers."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        f, c = config.feature_channels, config.classifier_conv_channels
        t = config.context_n + config.k_value
        s = config.feature_spatial
        self.conv = self.add("conv", Conv3dLayer(rng, f, c, 3, padding=1))
        flat = c * t * s * s
        self.fc0 = self.add("fc0", LinearLayer(rng, flat, config.fc_dims[0]))
        self.fc1 = self.add("fc1", LinearLayer(rng, config.fc_dims[0], config.fc_dims[1]))
        self.out = self.add("out", LinearLayer(rng, config.fc_dims[1], config.num_classes,
                                               zero_init=True))

    def forward(self, features):
        cfg = self.config
        t = cfg.context_n + cfg.k_value
        expect = (cfg.feature_channels, t, cfg.feature_spatial, cfg.feature_spatial)
        if features.shape[1:] != expect:
            raise ShapeError(f"classifier expects [N, {expect[0]}, {t}, {expect[2]}, "
                             f"{expect[3]}] after concatenation, got {features.shape}")
        x = ops.relu(self.conv.forward(features))
        n = x.shape[0]
        x = x.reshape(n, -1)
        x = ops.relu(self.fc0.forward(x))
        x = ops.relu(self.fc1.forward(x))
        return self.out.forward(x)


# ---------------------------------------------------------------------------
# the full model

class CGAP2Model:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.training = False
        root = np.random.SeedSequence((seed, 0xC6A9))
        enc_ss, tmp_ss, dec_ss, cls_ss = root.spawn(4)
        self.encoder = Encoder(config, np.random.default_rng(enc_ss))
        self.temporal = TemporalModule(config, np.random.default_rng(tmp_ss))
        self.decoder = Decoder(config, np.random.default_rng(dec_ss))
        self.classifier = Classifier(config, np.random.default_rng(cls_ss))
        # voxel -> millimeter calibration, set from the dataset volume
        self.volume_min = np.zeros(3, dtype=np.float32)
        self.volume_max = np.full(3, float(config.heatmap_size - 1), dtype=np.float32)

    # -- bookkeeping ---------------------------------------------------------

    def stage(self, name) -> _Stage:
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}")
        return getattr(self, name)

    def named_parameters(self, stage=None):
        names = STAGES if stage in (None, "all") else (stage,)
        out = []
        for s in names:
            out.extend((f"{s}.{n}", p) for n, p in self.stage(s).named_parameters())
        return out

    def named_buffers(self):
        out = [("meta.volume_min", self.volume_min), ("meta.volume_max", self.volume_max)]
        for s in STAGES:
            out.extend((f"{s}.{n}", b) for n, b in self.stage(s).named_buffers())
        return out

    def count_parameters(self, stage="all"):
        return sum(p.value.size for _, p in self.named_parameters(stage))

    def set_stage_frozen(self, stage, frozen):
        for _, p in self.named_parameters(stage):
            p.frozen = frozen
            p.value.requires_grad = not frozen

    def stage_frozen(self, stage):
        return all(p.frozen for _, p in self.named_parameters(stage))

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def set_volume(self, volume_min, volume_max):
        self.volume_min[:] = np.asarray(volume_min, dtype=np.float32)
        self.volume_max[:] = np.asarray(volume_max, dtype=np.float32)

    # -- forward passes ------------------------------------------------------

    def _stage_training(self, stage):
        # frozen stages run their batch norms in eval mode so their
        # running statistics stay bit-identical through later phases
        return self.training and not self.stage_frozen(stage)

    def encoder_forward(self, images):
        """[N*n, 3, S, S] -> per-frame features [N*n, F, s, s]."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        return self.encoder.forward(images, training=self._stage_training("encoder"))

    def temporal_forward(self, features):
        """[N, F, n, s, s] -> predicted future features [N, F, k, s, s]."""
        return self.temporal.forward(features, training=self._stage_training("temporal"))

    def decoder_forward(self, features):
        """[N*k, F, s, s] -> heatmaps [N*k, J, Hd, Hd, Hd]."""
        return self.decoder.forward(features, training=self._stage_training("decoder"))

    def _frames_to_features(self, images):
        """[N, n, 3, S, S] frames -> encoder features [N, F, n, s, s]."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        if images.data.ndim != 5 or images.shape[1] != self.config.context_n:
            raise ShapeError(f"expected [N, {self.config.context_n}, 3, S, S] frame "
                             f"windows, got {images.shape}")
        n, ctx = images.shape[0], self.config.context_n
        flat = images.reshape(n * ctx, *images.shape[2:])
        feats = self.encoder_forward(flat)
        s = self.config.feature_spatial
        return feats.reshape(n, ctx, self.config.feature_channels, s, s).transpose(0, 2, 1, 3, 4)

    def heatmaps_to_pose(self, heatmaps):
        """Soft-argmax in voxel space, then the affine millimeter mapping."""
        hd = self.config.heatmap_size
        voxels = ops.soft_argmax3d(heatmaps)
        return ops.voxel_to_world(voxels, self.volume_min, self.volume_max, (hd, hd, hd))

    def pose_predict(self, images):
        """Frame windows [N, n, 3, S, S] -> future poses [N, k, 17, 3] (mm)."""
        feats = self._frames_to_features(images)
        future = self.temporal_forward(feats)
        n, k = future.shape[0], self.config.k_value
        s = self.config.feature_spatial
        flat = future.transpose(0, 2, 1, 3, 4).reshape(n * k, self.config.feature_channels, s, s)
        heatmaps = self.decoder_forward(flat)
        pose = self.heatmaps_to_pose(heatmaps)
        return pose.reshape(n, k, self.config.num_joints, 3)

    def decode_single_frames(self, images):
        """[N, 3, S, S] frames -> poses [N, 17, 3]; used for encoder/decoder
        pretraining (no temporal module involved)."""
        feats = self.encoder_forward(images)
        return self.heatmaps_to_pose(self.decoder_forward(feats))

    def classifier_forward(self, images, historical_only=False):
        """Frame windows [N, n, 3, S, S] -> logits [N, num_classes].

        The decoder is not evaluated. With ``historical_only`` the
        predicted future features are replaced by zeros.
        """
        feats = self._frames_to_features(images)
        with no_grad():
            future = self.temporal_forward(feats)
        if historical_only:
            future = Tensor(np.zeros_like(future.data))
        else:
            future = future.detach()
        return self.classifier_features_forward(feats, future)

    def classifier_features_forward(self, encoder_feats, future_feats):
        """Classifier on precomputed features: [N, F, n, s, s] concat
        [N, F, k, s, s] along the time axis."""
        joint = ops.concat_channels(encoder_feats, future_feats, axis=2)
        return self.classifier.forward(joint)

    # -- checkpoints ---------------------------------------------------------

    def _checkpoint_entries(self):
        entries = [(n, p.value.data) for n, p in self.named_parameters()]
        entries.extend(self.named_buffers())
        return entries

    def save_checkpoint(self, path):
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            for name, arr in self._checkpoint_entries():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                for d in arr.shape:
                    fh.write(struct.pack("<Q", d))
                fh.write(arr.astype("<f4", copy=False).tobytes())

    def load_checkpoint(self, path):
        expected = {name: arr for name, arr in self._checkpoint_entries()}
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: bad magic")
            version = struct.unpack("<I", fh.read(4))[0]
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            seen = set()
            while True:
                head = fh.read(4)
                if not head:
                    break
                try:
                    name = fh.read(struct.unpack("<I", head)[0]).decode("utf-8")
                    rank = struct.unpack("<I", fh.read(4))[0]
                    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
                except (struct.error, UnicodeDecodeError) as exc:
                    raise CheckpointError(f"{path}: truncated or corrupt entry") from exc
                nbytes = 4 * int(np.prod(shape)) if shape else 4
                raw = fh.read(nbytes)
                if len(raw) != nbytes:
                    raise CheckpointError(f"{path}: truncated payload for {name!r}")
                payload = np.frombuffer(raw, dtype="<f4").reshape(shape)
                if name not in expected:
                    raise CheckpointError(f"{path}: unknown parameter {name!r}")
                if expected[name].shape != payload.shape:
                    raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                          f"{payload.shape} vs {expected[name].shape}")
                expected[name][...] = payload.astype(expected[name].dtype)
                seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}...")
