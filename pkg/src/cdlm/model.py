"""Shared-encoder VAE whose latents borrow the other domain's deep features.

One encoder serves both domains and emits, per image, the variational moments
(mu, log sigma) and a sigmoid-bounded deep representation h. A latent for one
domain is sampled with its own moments but with the *other* domain's h mixed
into the auxiliary noise:

    z_st = mu_s + sigma_s * (gamma1 * h_t + gamma2 * eps)

A single decoder maps such latents, or plain ``gamma1 * h + gamma2 * eps``
codes, back to images. A small discriminator behind a gradient-reversal op
tries to tell h_s from h_t.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, StateError
from .params import ParamSet, fan_in_uniform
from .tensor import Tensor


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


def _default_conv() -> tuple[ConvSpec, ...]:
    return (ConvSpec(16, 3, 2), ConvSpec(32, 3, 2), ConvSpec(64, 3, 2))


@dataclass(frozen=True)
class NetConfig:
    channels: int = 3
    height: int = 16
    width: int = 16
    conv: tuple[ConvSpec, ...] = field(default_factory=_default_conv)
    z_dim: int = 64
    disc_hidden: int = 256
    slope: float = 0.2
    # 1-based conv layer feeding the h head; None means the last layer
    h_tap: int | None = None
    # init gain of the h head; sets the spread of h against gamma2 * eps
    h_gain: float = 8.0

    def __post_init__(self):
        conv = tuple(c if isinstance(c, ConvSpec) else ConvSpec(*c) for c in self.conv)
        object.__setattr__(self, "conv", conv)
        if self.z_dim < 2:
            raise ConfigurationError(f"z_dim must be >= 2, got {self.z_dim}")
        if not conv:
            raise ConfigurationError("encoder needs at least one conv layer")
        if self.h_gain <= 0:
            raise ConfigurationError(f"h_gain must be positive, got {self.h_gain}")
        if self.h_tap is not None and not 1 <= self.h_tap <= len(conv):
            raise ConfigurationError(f"h_tap {self.h_tap} outside 1..{len(conv)}")
        sizes = self.spatial_sizes()
        if sizes[-1][0] < 1 or sizes[-1][1] < 1:
            raise ConfigurationError(f"encoder output extent {sizes[-1]} is empty")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def tap_layer(self) -> int:
        return self.h_tap if self.h_tap is not None else len(self.conv)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """(H, W) of the input followed by the output of every conv layer."""
        h, w = self.height, self.width
        sizes = [(h, w)]
        for c in self.conv:
            h = T.conv_output_size(h, c.kernel, c.stride, c.padding)
            w = T.conv_output_size(w, c.kernel, c.stride, c.padding)
            sizes.append((h, w))
        return sizes

    def layer_width(self, layer: int) -> int:
        """Flattened activation count after 1-based conv ``layer``."""
        h, w = self.spatial_sizes()[layer]
        return self.conv[layer - 1].out_channels * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(asdict(c).values()) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["conv"] = tuple(ConvSpec(*c) for c in d["conv"])
        return cls(**d)


@dataclass
class DomainInfo:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise DimensionError(f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} disagree")

    @property
    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)


@dataclass
class DeepRep:
    h: Tensor


@dataclass
class TransferLatent:
    z: Tensor
    info_domain: Domain
    rep_domain: Domain
    diagnostic: bool = False

    def __post_init__(self):
        if self.info_domain == self.rep_domain and not self.diagnostic:
            raise ConfigurationError("a cross-modulated latent needs moments and h from different domains")


def modulate(info: DomainInfo, rep_other: DeepRep, eps: Tensor, gamma1: float, gamma2: float,
             info_domain: Domain = Domain.SOURCE, rep_domain: Domain = Domain.TARGET,
             diagnostic: bool = False) -> TransferLatent:
    """z = mu + sigma * (gamma1 * h_other + gamma2 * eps)."""
    if gamma1 < 0 or gamma2 < 0:
        raise ConfigurationError(f"gammas must be non-negative, got ({gamma1}, {gamma2})")
    for name, t in (("h", rep_other.h), ("eps", eps)):
        if t.shape != info.mu.shape:
            raise DimensionError(f"modulate: {name} shape {t.shape} != moment shape {info.mu.shape}")
    noise = T.add(T.mul(rep_other.h, gamma1), T.mul(eps, gamma2))
    z = T.add(info.mu, T.mul(info.sigma, noise))
    return TransferLatent(z, Domain(info_domain), Domain(rep_domain), diagnostic)


def rep_to_latent(rep: DeepRep, eps: Tensor, gamma1: float, gamma2: float) -> Tensor:
    """The generation code gamma1 * h + gamma2 * eps."""
    if rep.h.shape != eps.shape:
        raise DimensionError(f"rep_to_latent: h shape {rep.h.shape} != eps shape {eps.shape}")
    return T.add(T.mul(rep.h, gamma1), T.mul(eps, gamma2))


def closed_form_moments(info: DomainInfo, rep_moments, gamma1: float, gamma2: float):
    """Mean and std of the modulated latent when h ~ N(mu_h, sigma_h^2), per coordinate.

    mu_zz    = mu + gamma1 * sigma * mu_h
    sigma_zz = sigma * sqrt(gamma1^2 * sigma_h^2 + gamma2^2)

    Accepts tensors (differentiable) or arrays; ``rep_moments`` broadcasts
    against the batch moments.
    """
    mu_h, sigma_h = rep_moments
    mu_h = mu_h if isinstance(mu_h, Tensor) else Tensor(np.asarray(mu_h, dtype=info.mu.dtype))
    sigma_h = sigma_h if isinstance(sigma_h, Tensor) else Tensor(np.asarray(sigma_h, dtype=info.mu.dtype))
    if np.any(sigma_h.data < 0):
        raise ConfigurationError("sigma_h must be non-negative")
    sigma = info.sigma
    mu_zz = T.add(info.mu, T.mul(T.mul(sigma, mu_h), gamma1))
    spread_sq = T.add(T.mul(T.square(sigma_h), gamma1 ** 2), gamma2 ** 2)
    if np.all(spread_sq.data > 0):
        spread = T.sqrt(spread_sq)
    else:
        spread = Tensor(np.sqrt(spread_sq.data))  # degenerate: no noise at all
    sigma_zz = T.mul(sigma, spread)
    return mu_zz, sigma_zz


class CDLM:
    """Encoder / decoder / discriminator parameters and their forward maps."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or NetConfig()
        self.params = ParamSet()
        self._initialized = False
        self._build(np.random.default_rng(seed), dtype)

    # -- construction -------------------------------------------------------
    def _build(self, rng: np.random.Generator, dtype) -> None:
        cfg, p = self.config, self.params
        gain = np.sqrt(2.0 / (1.0 + cfg.slope ** 2))
        in_ch = cfg.channels
        for i, c in enumerate(cfg.conv, start=1):
            fan_in = in_ch * c.kernel * c.kernel
            p.add(f"enc.conv{i}.w", fan_in_uniform(rng, (c.out_channels, in_ch, c.kernel, c.kernel), fan_in, gain, dtype), "encoder")
            p.add(f"enc.conv{i}.b", np.zeros(c.out_channels, dtype), "encoder")
            in_ch = c.out_channels
        flat = cfg.layer_width(len(cfg.conv))
        tap = cfg.layer_width(cfg.tap_layer)
        for head, width, g in (("mu", flat, 1.0), ("logsig", flat, 1.0), ("h", tap, cfg.h_gain)):
            p.add(f"enc.{head}.w", fan_in_uniform(rng, (cfg.z_dim, width), width, g, dtype), "encoder")
            p.add(f"enc.{head}.b", np.zeros(cfg.z_dim, dtype), "encoder")

        last = cfg.conv[-1].out_channels
        hl, wl = cfg.spatial_sizes()[-1]
        p.add("dec.fc.w", fan_in_uniform(rng, (last * hl * wl, cfg.z_dim), cfg.z_dim, gain, dtype), "decoder")
        p.add("dec.fc.b", np.zeros(last * hl * wl, dtype), "decoder")
        n = len(cfg.conv)
        for j in range(n):
            layer = n - j  # mirrors encoder layer ``layer``
            c = cfg.conv[layer - 1]
            cin = c.out_channels
            cout = cfg.conv[layer - 2].out_channels if layer > 1 else cfg.channels
            fan_in = cin * c.kernel * c.kernel // (c.stride * c.stride)
            g = gain if layer > 1 else 1.0
            p.add(f"dec.deconv{j + 1}.w", fan_in_uniform(rng, (cin, cout, c.kernel, c.kernel), fan_in, g, dtype), "decoder")
            p.add(f"dec.deconv{j + 1}.b", np.zeros(cout, dtype), "decoder")

        p.add("disc.fc1.w", fan_in_uniform(rng, (cfg.disc_hidden, cfg.z_dim), cfg.z_dim, gain, dtype), "discriminator")
        p.add("disc.fc1.b", np.zeros(cfg.disc_hidden, dtype), "discriminator")
        p.add("disc.fc2.w", fan_in_uniform(rng, (1, cfg.disc_hidden), cfg.disc_hidden, 1.0, dtype), "discriminator")
        p.add("disc.fc2.b", np.zeros(1, dtype), "discriminator")
        self._initialized = True

    @property
    def dtype(self):
        return self.params["enc.conv1.w"].dtype

    def astype(self, dtype) -> "CDLM":
        """Convert every parameter in place."""
        self.params.astype(dtype)
        return self

    def clone(self, dtype=None) -> "CDLM":
        """Independent copy, optionally in another precision."""
        dtype = np.dtype(dtype or self.dtype)
        twin = CDLM(self.config, seed=0, dtype=dtype)
        twin.params.load_state_dict({n: a.astype(dtype) for n, a in self.params.state_dict().items()})
        return twin

    def _require_ready(self) -> None:
        if not self._initialized:
            raise StateError("model parameters are not initialised")

    # -- forward maps ---------------------------------------------------------
    def _check_images(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.config.image_shape:
            raise ConfigurationError(f"expected images of shape (N, {self.config.image_shape}), got {x.shape}")
        return x

    def encode(self, x: Tensor) -> tuple[DomainInfo, DeepRep]:
        """Images -> (moments, deep representation) through the shared encoder."""
        self._require_ready()
        x = self._check_images(x)
        p, cfg = self.params, self.config
        a = x
        tapped = None
        for i, c in enumerate(cfg.conv, start=1):
            a = T.conv2d(a, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], c.stride, c.padding)
            a = T.leaky_relu(a, cfg.slope)
            if i == cfg.tap_layer:
                tapped = T.flatten(a)
        flat = T.flatten(a)
        mu = T.linear(flat, p["enc.mu.w"], p["enc.mu.b"])
        log_sigma = T.linear(flat, p["enc.logsig.w"], p["enc.logsig.b"])
        h = T.sigmoid(T.linear(tapped, p["enc.h.w"], p["enc.h.b"]))
        return DomainInfo(mu, log_sigma), DeepRep(h)

    def decode(self, z) -> Tensor:
        """Latent batch (or TransferLatent) -> images in (0, 1)."""
        self._require_ready()
        if isinstance(z, TransferLatent):
            z = z.z
        cfg, p = self.config, self.params
        if z.ndim != 2 or z.shape[1] != cfg.z_dim:
            raise ConfigurationError(f"decoder expects (N, {cfg.z_dim}) latents, got {z.shape}")
        sizes = cfg.spatial_sizes()
        hl, wl = sizes[-1]
        a = T.linear(z, p["dec.fc.w"], p["dec.fc.b"])
        a = T.leaky_relu(a, cfg.slope)
        a = T.reshape(a, (z.shape[0], cfg.conv[-1].out_channels, hl, wl))
        n = len(cfg.conv)
        for j in range(n):
            layer = n - j
            c = cfg.conv[layer - 1]
            target_h, target_w = sizes[layer - 1]
            out_pad = target_h - ((a.shape[2] - 1) * c.stride - 2 * c.padding + c.kernel)
            out_pad_w = target_w - ((a.shape[3] - 1) * c.stride - 2 * c.padding + c.kernel)
            if out_pad != out_pad_w or not 0 <= out_pad < c.stride + 1:
                raise ConfigurationError(f"cannot mirror encoder layer {layer} with a transposed conv")
            a = T.conv_transpose2d(a, p[f"dec.deconv{j + 1}.w"], p[f"dec.deconv{j + 1}.b"],
                                   c.stride, c.padding, out_pad)
            a = T.leaky_relu(a, cfg.slope) if layer > 1 else T.sigmoid(a)
        return a

    def discriminate(self, rep: DeepRep, grl_scale: float = 1.0) -> Tensor:
        """P(source | h) behind a gradient-reversal op; shape (N, 1)."""
        self._require_ready()
        p = self.params
        a = T.grad_reverse(rep.h, grl_scale)
        a = T.leaky_relu(T.linear(a, p["disc.fc1.w"], p["disc.fc1.b"]), self.config.slope)
        return T.sigmoid(T.linear(a, p["disc.fc2.w"], p["disc.fc2.b"]))

    def test_mode_adapt(self, x_t, gamma1: float = 1.0, gamma2: float = 0.1,
                        rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> Tensor:
        """Target images -> source-styled images via decode(gamma1 * h_t + gamma2 * eps).

        Only the target batch is consulted. ``eps`` defaults to a draw from
        ``rng`` (or zeros when neither is given and gamma2 == 0).
        """
        self._require_ready()
        with T.no_grad():
            _, rep = self.encode(x_t)
            if eps is None:
                if gamma2 == 0:
                    eps = np.zeros(rep.h.shape)
                else:
                    eps = (rng or np.random.default_rng(0)).standard_normal(rep.h.shape)
            eps_t = Tensor(np.asarray(eps, dtype=rep.h.dtype))
            return self.decode(rep_to_latent(rep, eps_t, gamma1, gamma2))

    def features(self, x, batch_size: int = 256) -> np.ndarray:
        """Deep representations h for an image array, without recording a graph."""
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                xb = Tensor(np.asarray(x[i:i + batch_size], dtype=self.dtype))
                out.append(self.encode(xb)[1].h.data)
        return np.concatenate(out, axis=0)

    def adapt_array(self, x, gamma1: float, gamma2: float, seed: int = 0, batch_size: int = 256) -> np.ndarray:
        rng = np.random.default_rng(seed)
        out = []
        for i in range(0, len(x), batch_size):
            xb = Tensor(np.asarray(x[i:i + batch_size], dtype=self.dtype))
            out.append(self.test_mode_adapt(xb, gamma1, gamma2, rng=rng).data)
        return np.concatenate(out, axis=0)
