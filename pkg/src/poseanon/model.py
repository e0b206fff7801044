"""Generator (encoder + identity-conditioned decoder) and the three
discriminator networks (Wasserstein critic, identity classifier, head-pose
regressor), all built from naive inception blocks.

An inception block runs 1x1, 2x2 and 4x4 convolutions in parallel at a
shared stride and concatenates the results along channels. Even-sized
kernels use asymmetric padding (extra pixel on the right/bottom) so all
branches emit identical spatial sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .rng import make_generator

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class InceptionSpec:
    """Channel counts for the 1x1 / 2x2 / 4x4 branches plus a shared stride."""

    branch_channels: tuple[int, int, int]
    stride: int = 1

    def __post_init__(self):
        if len(self.branch_channels) != 3 or any(c < 1 for c in self.branch_channels):
            raise ConfigError(f"branch_channels must be three counts >= 1, got {self.branch_channels}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")

    @property
    def out_channels(self) -> int:
        return sum(self.branch_channels)


def _branch_pad_total(size: int, kernel: int, stride: int) -> int:
    """Total padding so the branch emits ceil(size / stride) outputs."""
    out = -(-size // stride)
    return max(0, (out - 1) * stride + kernel - size)


class InceptionBlock(nn.Module):
    """Naive inception module: parallel 1x1/2x2/4x4 convolutions, concatenated.

    Implemented as a single 4x4 convolution with a zero mask over the kernel
    positions each branch does not use. With padding aligned to the 4x4
    branch, the 1x1 and 2x2 taps land on exactly the pixels the standalone
    branch convolutions would read, so the fused output equals the channel
    concatenation of the three separate convolutions (one conv dispatch
    instead of three, which matters on CPU).
    """

    def __init__(self, in_channels: int, spec: InceptionSpec, in_size: tuple[int, int]):
        super().__init__()
        self.in_channels = in_channels
        self.spec = spec
        self.in_size = tuple(in_size)
        h, w = self.in_size
        s = spec.stride
        if h < 1 or w < 1:
            raise ConfigError(f"input size {in_size} too small for inception block")

        pads = {k: (_branch_pad_total(h, k, s), _branch_pad_total(w, k, s)) for k in (1, 2, 4)}
        p4h, p4w = pads[4]
        # F.pad order: (left, right, top, bottom); extra pixel goes right/bottom.
        self._pad = (p4w // 2, p4w - p4w // 2, p4h // 2, p4h - p4h // 2)

        c1, c2, c4 = spec.branch_channels
        mask = torch.zeros(c1 + c2 + c4, 1, 4, 4)
        for k, lo, hi in ((1, 0, c1), (2, c1, c1 + c2)):
            dh = p4h // 2 - pads[k][0] // 2
            dw = p4w // 2 - pads[k][1] // 2
            if not (0 <= dh <= 4 - k and 0 <= dw <= 4 - k):
                raise ConfigError(f"cannot align {k}x{k} branch inside 4x4 kernel for size {in_size}, stride {s}")
            mask[lo:hi, :, dh:dh + k, dw:dw + k] = 1.0
        mask[c1 + c2:] = 1.0
        self.register_buffer("mask", mask)

        self.weight = nn.Parameter(torch.empty(c1 + c2 + c4, in_channels, 4, 4))
        self.bias = nn.Parameter(torch.zeros(c1 + c2 + c4))

    @property
    def out_size(self) -> tuple[int, int]:
        s = self.spec.stride
        return (-(-self.in_size[0] // s), -(-self.in_size[1] // s))

    def init_parameters(self, gen: torch.Generator) -> None:
        # Fan-in differs per branch: k*k taps times in_channels.
        c1, c2, c4 = self.spec.branch_channels
        for k, lo, hi in ((1, 0, c1), (2, c1, c1 + c2), (4, c1 + c2, c1 + c2 + c4)):
            fan_in = self.in_channels * k * k
            slab = torch.randn((hi - lo,) + self.weight.shape[1:], generator=gen, dtype=self.weight.dtype)
            with torch.no_grad():
                self.weight[lo:hi] = slab / math.sqrt(fan_in)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != self.in_size:
            raise ShapeError(
                f"inception block expects (B, {self.in_channels}, {self.in_size[0]}, {self.in_size[1]}), "
                f"got {tuple(x.shape)}")
        if any(self._pad):
            x = F.pad(x, self._pad)
        return F.conv2d(x, self.weight * self.mask, self.bias, self.spec.stride)

    def branch_outputs(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """The three branch convolutions applied independently (reference path)."""
        c1, c2, c4 = self.spec.branch_channels
        outs = []
        for k, lo, hi in ((1, 0, c1), (2, c1, c1 + c2), (4, c1 + c2, c1 + c2 + c4)):
            ph = _branch_pad_total(self.in_size[0], k, self.spec.stride)
            pw = _branch_pad_total(self.in_size[1], k, self.spec.stride)
            dh = self._pad[2] - ph // 2
            dw = self._pad[0] - pw // 2
            weight = self.weight[lo:hi, :, dh:dh + k, dw:dw + k]
            padded = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))
            outs.append(F.conv2d(padded, weight, self.bias[lo:hi], self.spec.stride))
        return tuple(outs)


def inception_block(x: torch.Tensor, block: InceptionBlock) -> torch.Tensor:
    """Apply one inception block to a feature map."""
    return block(x)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; two bundles built from equal configs have
    identical parameter shapes."""

    image_size: tuple[int, int, int]  # (H, W, C)
    n_subjects: int
    d_z: int = 64
    encoder_blocks: tuple[InceptionSpec, ...] = ()
    critic_blocks: tuple[InceptionSpec, ...] = ()
    classifier_blocks: tuple[InceptionSpec, ...] = ()
    regressor_blocks: tuple[InceptionSpec, ...] = ()
    decoder_stages: tuple[tuple[int, int, int], ...] = ()  # branch triples, one per x2 upsample
    decoder_base_channels: int = 18
    head_mode: str = "flatten"  # or "gap"
    shared_trunk: bool = False

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError(f"n_subjects must be >= 1, got {self.n_subjects}")
        if self.d_z < 1:
            raise ConfigError(f"d_z must be >= 1, got {self.d_z}")
        h, w, c = self.image_size
        if h < 1 or w < 1 or c < 1:
            raise ConfigError(f"bad image_size {self.image_size}")
        if self.head_mode not in ("flatten", "gap"):
            raise ConfigError(f"head_mode must be 'flatten' or 'gap', got {self.head_mode!r}")
        factor = 2 ** len(self.decoder_stages)
        if h % factor or w % factor:
            raise ConfigError(f"image size {h}x{w} not divisible by decoder upsampling factor {factor}")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "n_subjects": self.n_subjects,
            "d_z": self.d_z,
            "encoder_blocks": [[list(b.branch_channels), b.stride] for b in self.encoder_blocks],
            "critic_blocks": [[list(b.branch_channels), b.stride] for b in self.critic_blocks],
            "classifier_blocks": [[list(b.branch_channels), b.stride] for b in self.classifier_blocks],
            "regressor_blocks": [[list(b.branch_channels), b.stride] for b in self.regressor_blocks],
            "decoder_stages": [list(t) for t in self.decoder_stages],
            "decoder_base_channels": self.decoder_base_channels,
            "head_mode": self.head_mode,
            "shared_trunk": self.shared_trunk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def specs(key):
            return tuple(InceptionSpec(tuple(br), s) for br, s in d.get(key, []))
        return cls(
            image_size=tuple(d["image_size"]),
            n_subjects=d["n_subjects"],
            d_z=d.get("d_z", 64),
            encoder_blocks=specs("encoder_blocks"),
            critic_blocks=specs("critic_blocks"),
            classifier_blocks=specs("classifier_blocks"),
            regressor_blocks=specs("regressor_blocks"),
            decoder_stages=tuple(tuple(t) for t in d.get("decoder_stages", [])),
            decoder_base_channels=d.get("decoder_base_channels", 18),
            head_mode=d.get("head_mode", "flatten"),
            shared_trunk=d.get("shared_trunk", False),
        )


def _split_branches(total: int) -> tuple[int, int, int]:
    c = max(1, total // 3)
    return (c, c, max(1, total - 2 * c))


def default_model_config(image_size: tuple[int, int, int], n_subjects: int, d_z: int = 64,
                         width: float = 1.0, head_mode: str = "flatten",
                         shared_trunk: bool = False) -> ModelConfig:
    """Three stride-2 inception blocks per network, decoder mirrored with
    three x2 upsampling stages; `width` scales all channel sums."""
    sums = [max(3, round(width * s)) for s in (9, 12, 18)]
    trunk = tuple(InceptionSpec(_split_branches(s), 2) for s in sums)
    dec = tuple(_split_branches(s) for s in (sums[1], sums[0], sums[0]))
    return ModelConfig(
        image_size=tuple(image_size),
        n_subjects=n_subjects,
        d_z=d_z,
        encoder_blocks=trunk,
        critic_blocks=trunk,
        classifier_blocks=trunk,
        regressor_blocks=trunk,
        decoder_stages=dec,
        decoder_base_channels=sums[-1],
        head_mode=head_mode,
        shared_trunk=shared_trunk,
    )


class _Trunk(nn.Module):
    """Stack of inception blocks with LeakyReLU between them, then flatten/GAP."""

    def __init__(self, in_channels: int, blocks: tuple[InceptionSpec, ...],
                 in_size: tuple[int, int], head_mode: str):
        super().__init__()
        mods = []
        c, size = in_channels, in_size
        for spec in blocks:
            block = InceptionBlock(c, spec, size)
            mods.append(block)
            c, size = spec.out_channels, block.out_size
        self.blocks = nn.ModuleList(mods)
        self.head_mode = head_mode
        self.out_features = c if head_mode == "gap" else c * size[0] * size[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = F.leaky_relu(block(x), LEAKY_SLOPE)
        if self.head_mode == "gap":
            return x.mean(dim=(2, 3))
        return x.flatten(1)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w, c = config.image_size
        self.trunk = _Trunk(c, config.encoder_blocks, (h, w), config.head_mode)
        self.mean_head = nn.Linear(self.trunk.out_features, config.d_z)
        self.logvar_head = nn.Linear(self.trunk.out_features, config.d_z)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.trunk(x)
        return self.mean_head(feats), self.logvar_head(feats)


class Decoder(nn.Module):
    """Maps (z, identity code) to an image in [-1, 1]; the code is
    concatenated to z once, before the first layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w, c_img = config.image_size
        factor = 2 ** len(config.decoder_stages)
        self.base = (config.decoder_base_channels, h // factor, w // factor)
        self.fc = nn.Linear(config.d_z + config.n_subjects, int(np.prod(self.base)))
        mods = []
        c, size = self.base[0], (self.base[1], self.base[2])
        for branches in config.decoder_stages:
            size = (size[0] * 2, size[1] * 2)
            block = InceptionBlock(c, InceptionSpec(branches, 1), size)
            mods.append(block)
            c = block.spec.out_channels
        self.stages = nn.ModuleList(mods)
        self.out_conv = nn.Conv2d(c, c_img, kernel_size=1)

    def forward(self, z: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        x = self.fc(torch.cat([z, code], dim=1))
        x = x.view(-1, *self.base)
        for block in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(block(x), LEAKY_SLOPE)
        return torch.tanh(self.out_conv(x))


class _HeadNet(nn.Module):
    """Inception trunk plus one linear head (critic / classifier / regressor)."""

    def __init__(self, config: ModelConfig, blocks: tuple[InceptionSpec, ...], out_dim: int):
        super().__init__()
        h, w, c = config.image_size
        self.trunk = _Trunk(c, blocks, (h, w), config.head_mode)
        self.head = nn.Linear(self.trunk.out_features, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


class Critic(_HeadNet):
    """Wasserstein critic: unbounded scalar score per image."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, config.critic_blocks, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x).squeeze(-1)


class IdentityClassifier(_HeadNet):
    """Identity head; forward returns logits of length n_subjects."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, config.classifier_blocks, config.n_subjects)


class PoseRegressor(_HeadNet):
    """Pose head; forward returns (yaw, pitch, roll) in normalized units."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, config.regressor_blocks, 3)


class SharedTrunkDiscriminator(nn.Module):
    """Optional variant: one inception trunk feeding all three heads.

    Off by default because the gradient penalty is meant to constrain the
    critic path alone; with a shared trunk it also constrains features the
    classifier and regressor consume.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w, c = config.image_size
        self.trunk = _Trunk(c, config.critic_blocks, (h, w), config.head_mode)
        self.critic_head = nn.Linear(self.trunk.out_features, 1)
        self.identity_head = nn.Linear(self.trunk.out_features, config.n_subjects)
        self.pose_head = nn.Linear(self.trunk.out_features, 3)

    def critic_score(self, x):
        return self.critic_head(self.trunk(x)).squeeze(-1)

    def identity_logits(self, x):
        return self.identity_head(self.trunk(x))

    def pose_estimate(self, x):
        return self.pose_head(self.trunk(x))


def one_hot(y_s: int, n_subjects: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-hot identity code for a 1-based identity label."""
    if not 1 <= y_s <= n_subjects:
        raise IndexError(f"identity {y_s} outside 1..{n_subjects}")
    code = torch.zeros(n_subjects, dtype=dtype)
    code[y_s - 1] = 1.0
    return code


def one_hot_batch(labels: torch.Tensor, n_subjects: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-hot rows for a batch of 1-based identity labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 1 or labels.max() > n_subjects):
        raise IndexError(f"identity labels outside 1..{n_subjects}")
    return F.one_hot(labels - 1, n_subjects).to(dtype)


def reparameterize(mean: torch.Tensor, log_variance: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z = mean + exp(log_variance / 2) * noise, differentiable in both heads."""
    if mean.shape != log_variance.shape or mean.shape != noise.shape:
        raise ShapeError(f"shape mismatch: {tuple(mean.shape)}, {tuple(log_variance.shape)}, {tuple(noise.shape)}")
    if not (torch.isfinite(mean).all() and torch.isfinite(log_variance).all() and torch.isfinite(noise).all()):
        raise ValueError("non-finite input to reparameterize")
    return mean + torch.exp(0.5 * log_variance) * noise


@dataclass
class LatentCode:
    """Encoder posterior for one batch: mean/log-variance heads plus the
    sample drawn with the recorded noise."""

    mean: torch.Tensor
    log_variance: torch.Tensor
    sample: torch.Tensor
    noise: torch.Tensor = field(repr=False, default=None)


class ModelBundle:
    """Parameters of the generator pair and the three discriminator networks."""

    def __init__(self, config: ModelConfig, encoder: Encoder, decoder: Decoder,
                 critic=None, classifier=None, regressor=None, shared=None):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.critic = critic
        self.classifier = classifier
        self.regressor = regressor
        self.shared = shared

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "ModelBundle":
        encoder = Encoder(config)
        decoder = Decoder(config)
        if config.shared_trunk:
            bundle = cls(config, encoder, decoder, shared=SharedTrunkDiscriminator(config))
        else:
            bundle = cls(config, encoder, decoder, critic=Critic(config),
                         classifier=IdentityClassifier(config), regressor=PoseRegressor(config))
        bundle.initialize(seed)
        return bundle

    def initialize(self, seed: int) -> None:
        gen = make_generator(seed, "init")
        for name, module in self.named_networks():
            _init_network(module, gen)

    def named_networks(self):
        nets = [("encoder", self.encoder), ("decoder", self.decoder)]
        if self.shared is not None:
            nets.append(("shared", self.shared))
        else:
            nets += [("critic", self.critic), ("classifier", self.classifier),
                     ("regressor", self.regressor)]
        return nets

    @property
    def d_z(self) -> int:
        return self.config.d_z

    @property
    def n_subjects(self) -> int:
        return self.config.n_subjects

    @property
    def image_size(self) -> tuple[int, int, int]:
        return self.config.image_size

    # -- forward operations -------------------------------------------------

    def _check_images(self, x: torch.Tensor, op: str) -> None:
        h, w, c = self.config.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"{op} expects images (B, {c}, {h}, {w}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior (mean, log_variance) heads for an image batch."""
        self._check_images(x, "encode")
        return self.encoder(x)

    def encode_mean(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic latent used at evaluation/inference time."""
        return self.encode(x)[0]

    def decode(self, z: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.d_z:
            raise ShapeError(f"decode expects z (B, {self.config.d_z}), got {tuple(z.shape)}")
        if code.dim() != 2 or code.shape[1] != self.config.n_subjects or code.shape[0] != z.shape[0]:
            raise ShapeError(
                f"decode expects codes (B, {self.config.n_subjects}) matching z batch, got {tuple(code.shape)}")
        return self.decoder(z, code)

    def critic_score(self, x: torch.Tensor) -> torch.Tensor:
        self._check_images(x, "critic_score")
        if self.shared is not None:
            return self.shared.critic_score(x)
        return self.critic(x)

    def identity_logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check_images(x, "identity_logits")
        if self.shared is not None:
            return self.shared.identity_logits(x)
        return self.classifier(x)

    def identity_probs(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax identity probabilities, rows summing to 1."""
        return F.softmax(self.identity_logits(x), dim=1)

    def pose_estimate(self, x: torch.Tensor) -> torch.Tensor:
        self._check_images(x, "pose_estimate")
        if self.shared is not None:
            return self.shared.pose_estimate(x)
        return self.regressor(x)

    # -- parameter partitions ------------------------------------------------

    def generator_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def discriminator_parameters(self) -> list[nn.Parameter]:
        if self.shared is not None:
            return list(self.shared.parameters())
        return (list(self.critic.parameters()) + list(self.classifier.parameters())
                + list(self.regressor.parameters()))

    def named_parameter_blobs(self) -> dict[str, torch.Tensor]:
        """Parameters keyed by network/layer path (checkpoint layout)."""
        blobs = {}
        for net_name, module in self.named_networks():
            for pname, p in module.named_parameters():
                blobs[f"{net_name}/{pname}"] = p
        return blobs

    def parameter_checksum(self, partition: str = "all") -> str:
        import hashlib
        h = hashlib.sha256()
        params = {"all": lambda: [p for _, p in sorted(self.named_parameter_blobs().items())],
                  "generator": self.generator_parameters,
                  "discriminator": self.discriminator_parameters}[partition]()
        for p in params:
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for _, module in self.named_networks():
            module.to(dtype)
        return self


def _init_network(module: nn.Module, gen: torch.Generator) -> None:
    """Zero-mean Gaussian scaled by fan-in; biases zero."""
    for m in module.modules():
        if isinstance(m, InceptionBlock):
            m.init_parameters(gen)
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) / math.sqrt(m.in_features))
                if m.bias is not None:
                    m.bias.zero_()


# -- array layout helpers (data module speaks HWC numpy, networks NCHW torch) --

def images_to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(N, H, W, C) float array -> (N, C, H, W) tensor."""
    if images.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(batch: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) tensor -> (N, H, W, C) float32 array."""
    if batch.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) tensor, got shape {tuple(batch.shape)}")
    return batch.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32, copy=False)
