"""Optimisation loop with split encoder / decoder updates.

Each step evaluates two objectives on one shared forward graph:

* ``total_phi = adv + lambda1 * (KL_st + KL_ts) + lambda2 * rec`` drives the
  encoder (SGD with momentum) and, through the gradient-reversal op, the
  discriminator, which descends the same adversarial term with its own
  SGD-momentum optimiser.
* ``total_theta = rec + beta1 * Lc_s + beta2 * Lc_t`` drives the decoder (Adam).
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import DomainBatch
from .errors import ConfigurationError, FormatError, NonFiniteError, UsageError
from .losses import (LossReport, adversarial_loss, aggregate, consistency_loss, kl_standard_normal,
                     reconstruction_loss, write_trace)
from .model import CDLM, ConvSpec, DeepRep, Domain, DomainInfo, NetConfig, closed_form_moments, modulate, rep_to_latent
from .optim import Adam, SGDMomentum
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma1: float = 1.0
    gamma2: float = 0.1
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    beta1: float = 0.1
    beta2: float = 0.01
    eta1: float = 1e-3
    eta2: float = 2e-3
    momentum: float = 0.9
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    grl_scale: float = 1.0
    eval_every: int = 500
    rec_loss: str = "bce"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigurationError("gammas must be non-negative")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.rec_loss not in ("bce", "mse"):
            raise ConfigurationError(f"rec_loss must be 'bce' or 'mse', got {self.rec_loss!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_NET_KEYS = {"z_dim", "disc_hidden", "slope", "h_tap", "h_gain", "conv"}


def _coerce(value: str, typ):
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def parse_config_text(text: str) -> tuple[TrainConfig, NetConfig]:
    """Parse ``key = value`` lines (``#`` comments) into train and network configs.

    Unknown keys raise UsageError naming every offender.
    """
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    train_kw, net_kw, unknown = {}, {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in train_fields:
            train_kw[key] = _coerce(value, train_fields[key])
        elif key in _NET_KEYS:
            net_kw[key] = value
        else:
            unknown.append(key)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**train_kw), net_config_from_strings(net_kw)


def net_config_from_strings(kw: dict[str, str]) -> NetConfig:
    out = {}
    for key, value in kw.items():
        if key == "conv":
            out["conv"] = tuple(ConvSpec(*(int(v) for v in item.split(":"))) for item in value.split(","))
        elif key == "h_tap":
            out["h_tap"] = None if value in ("", "none", "None", "last") else int(value)
        elif key in ("slope", "h_gain"):
            out[key] = float(value)
        else:
            out[key] = int(value)
    return NetConfig(**out)


def format_config(cfg: TrainConfig, net: NetConfig | None = None) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    if net is not None:
        lines.append(f"z_dim = {net.z_dim}")
        lines.append(f"disc_hidden = {net.disc_hidden}")
        lines.append(f"slope = {net.slope}")
        lines.append(f"h_tap = {'last' if net.h_tap is None else net.h_tap}")
        lines.append(f"h_gain = {net.h_gain}")
        lines.append("conv = " + ",".join(f"{c.out_channels}:{c.kernel}:{c.stride}" for c in net.conv))
    return "\n".join(lines) + "\n"


def load_config(path) -> tuple[TrainConfig, NetConfig]:
    return parse_config_text(Path(path).read_text())


# Named overrides on top of the defaults. "desk" is the setting used for the
# 16x16 synthetic task: with lambda2 = 1e-4 the encoder sees almost nothing
# but the adversarial term and h collapses to a constant.
PRESETS: dict[str, str] = {
    "desk": "lambda2 = 1.0\ngrl_scale = 0.02\neta2 = 4e-3\nsteps = 4000\neval_every = 1000\n",
}


def preset_config(name: str, **changes) -> tuple[TrainConfig, NetConfig]:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg, net = parse_config_text(PRESETS[name])
    return cfg.replace(**changes), net


@dataclass
class TrainState:
    model: CDLM
    config: TrainConfig
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    opt_phi: SGDMomentum = None
    opt_xi: SGDMomentum = None
    opt_theta: Adam = None

    def __post_init__(self):
        p, c = self.model.params, self.config
        if self.opt_phi is None:
            self.opt_phi = SGDMomentum(p.partition("encoder"), c.eta1, c.momentum)
            self.opt_xi = SGDMomentum(p.partition("discriminator"), c.eta1, c.momentum)
            self.opt_theta = Adam(p.partition("decoder"), c.eta2, c.adam_b1, c.adam_b2, c.adam_eps)

    # -- persistence ----------------------------------------------------------
    def to_checkpoint(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "train_state",
            "step": self.step,
            "net_config": self.model.config.to_dict(),
            "train_config": dataclasses.asdict(self.config),
            "rng": self.rng.bit_generator.state,
        }
        arrays = {f"param/{n}": a for n, a in self.model.params.state_dict().items()}
        for tag, opt in (("phi", self.opt_phi), ("xi", self.opt_xi), ("theta", self.opt_theta)):
            arrays.update({f"opt.{tag}/{k}": v for k, v in opt.state().items()})
        return meta, arrays

    def save(self, path) -> Path:
        meta, arrays = self.to_checkpoint()
        return checkpoint.save(path, meta, arrays)


def new_state(config: TrainConfig, net: NetConfig | None = None) -> TrainState:
    model = CDLM(net or NetConfig(), seed=config.seed)
    return TrainState(model, config, 0, np.random.default_rng(config.seed + 1))


def resume(path) -> TrainState:
    """Rebuild a TrainState (parameters, optimiser slots, RNG) from a checkpoint."""
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "train_state":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not a training state", path=path)
    try:
        net = NetConfig.from_dict(meta["net_config"])
        cfg = TrainConfig(**meta["train_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"incomplete checkpoint metadata: {exc}", path=path) from None
    state = new_state(cfg, net)
    state.model.params.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    for tag, opt in (("phi", state.opt_phi), ("xi", state.opt_xi), ("theta", state.opt_theta)):
        prefix = f"opt.{tag}/"
        opt.load_state({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    state.rng.bit_generator.state = meta["rng"]
    state.step = int(meta["step"])
    return state


def load_model(path) -> CDLM:
    """Just the network from a training checkpoint."""
    return resume(path).model


# -- one step ------------------------------------------------------------------
def _batch_moments(h: Tensor) -> tuple[Tensor, Tensor]:
    mu = T.mean(h, axis=0, keepdims=True)
    var = T.mean(T.square(T.sub(h, mu)), axis=0, keepdims=True)
    return mu, T.sqrt(T.add(var, 1e-8))


@dataclass
class StepGraph:
    """Every tensor of one forward pass, kept for probes and diagnostics."""

    info_s: DomainInfo
    info_t: DomainInfo
    rep_s: DeepRep
    rep_t: DeepRep
    x_hat_st: Tensor
    x_tilde_s: Tensor | None
    x_hat_ts: Tensor | None
    x_tilde_t: Tensor | None
    terms: dict[str, Tensor]
    total_phi: Tensor
    total_theta: Tensor


def forward_losses(model: CDLM, xs: np.ndarray, xt: np.ndarray, eps_s: np.ndarray, eps_t: np.ndarray,
                   cfg: TrainConfig) -> StepGraph:
    """Build the full loss graph for one source / target mini-batch pair."""
    dtype = model.dtype
    b = len(xs)
    x = Tensor(np.concatenate([xs, xt]).astype(dtype, copy=False))
    info, rep = model.encode(x)
    head, tail = slice(0, b), slice(b, 2 * b)
    info_s = DomainInfo(info.mu[head], info.log_sigma[head])
    info_t = DomainInfo(info.mu[tail], info.log_sigma[tail])
    rep_s, rep_t = DeepRep(rep.h[head]), DeepRep(rep.h[tail])
    e_s, e_t = Tensor(eps_s.astype(dtype)), Tensor(eps_t.astype(dtype))

    z_st = modulate(info_s, rep_t, e_s, cfg.gamma1, cfg.gamma2, Domain.SOURCE, Domain.TARGET)
    z_ts = modulate(info_t, rep_s, e_t, cfg.gamma1, cfg.gamma2, Domain.TARGET, Domain.SOURCE)
    codes = [z_st.z]
    if cfg.beta1 > 0:
        codes.append(rep_to_latent(rep_s, e_s, cfg.gamma1, cfg.gamma2))
    if cfg.beta2 > 0:
        codes += [z_ts.z, rep_to_latent(rep_t, e_t, cfg.gamma1, cfg.gamma2)]
    decoded = model.decode(T.concat(codes, axis=0))
    chunks = [decoded[i * b:(i + 1) * b] for i in range(len(codes))]
    x_hat_st = chunks[0]
    x_tilde_s = chunks[1] if cfg.beta1 > 0 else None
    x_hat_ts, x_tilde_t = (chunks[-2], chunks[-1]) if cfg.beta2 > 0 else (None, None)

    rec = reconstruction_loss(x_hat_st, xs, cfg.rec_loss)
    kl_st = kl_standard_normal(*closed_form_moments(info_s, _batch_moments(rep_t.h), cfg.gamma1, cfg.gamma2))
    kl_ts = kl_standard_normal(*closed_form_moments(info_t, _batch_moments(rep_s.h), cfg.gamma1, cfg.gamma2))
    p = model.discriminate(DeepRep(rep.h), cfg.grl_scale)
    adv = adversarial_loss(p[head], p[tail])
    cons_s, cons_t = consistency_loss(x_hat_st, x_tilde_s, x_hat_ts, x_tilde_t)
    total_phi, total_theta = aggregate(rec, kl_st, kl_ts, adv, cons_s, cons_t,
                                       cfg.lambda1, cfg.lambda2, cfg.beta1, cfg.beta2)
    terms = dict(rec=rec, kl_st=kl_st, kl_ts=kl_ts, adv=adv, cons_s=cons_s, cons_t=cons_t)
    return StepGraph(info_s, info_t, rep_s, rep_t, x_hat_st, x_tilde_s, x_hat_ts, x_tilde_t,
                     terms, total_phi, total_theta)


def report_of(graph: StepGraph) -> LossReport:
    vals = {k: float(v.data) for k, v in graph.terms.items()}
    return LossReport(**vals, total_phi=float(graph.total_phi.data), total_theta=float(graph.total_theta.data))


def split_gradients(model: CDLM, graph: StepGraph) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of total_phi for encoder + discriminator and of total_theta for the decoder."""
    p = model.params
    p.zero_grad()
    phi_xi = list(p.partition("encoder").values()) + list(p.partition("discriminator").values())
    graph.total_phi.backward(inputs=phi_xi)
    grads = {"encoder": p.grads("encoder"), "discriminator": p.grads("discriminator")}
    p.zero_grad()
    graph.total_theta.backward(inputs=list(p.partition("decoder").values()))
    grads["decoder"] = p.grads("decoder")
    p.zero_grad()
    return grads


def sample_step_inputs(state: TrainState, source: np.ndarray, target: np.ndarray):
    b = state.config.batch_size
    rng = state.rng
    idx_s = rng.choice(len(source), size=b, replace=len(source) < b)
    idx_t = rng.choice(len(target), size=b, replace=len(target) < b)
    z = state.model.config.z_dim
    eps_s = rng.standard_normal((b, z))
    eps_t = rng.standard_normal((b, z))
    return source[idx_s], target[idx_t], eps_s, eps_t


def train_step(state: TrainState, source: np.ndarray, target: np.ndarray) -> tuple[TrainState, LossReport]:
    """Sample one mini-batch per domain, then apply the three optimiser updates.

    ``source`` / ``target`` are image arrays only; labels never enter here.
    """
    xs, xt, eps_s, eps_t = sample_step_inputs(state, source, target)
    try:
        graph = forward_losses(state.model, xs, xt, eps_s, eps_t, state.config)
    except NonFiniteError as exc:
        exc.report = LossReport(*(float("nan") for _ in range(8)))
        raise
    report = report_of(graph)
    if not report.is_finite():
        raise NonFiniteError("loss", report)
    grads = split_gradients(state.model, graph)
    state.opt_phi.step(grads["encoder"])
    state.opt_xi.step(grads["discriminator"])
    state.opt_theta.step(grads["decoder"])
    state.step += 1
    return state, report


# -- full runs -------------------------------------------------------------------
@dataclass
class FitResult:
    state: TrainState
    trace: list[tuple[int, LossReport]]
    checkpoints: list[Path]
    evals: list[dict]


def _images(x) -> np.ndarray:
    if isinstance(x, DomainBatch):
        return x.unlabeled().images
    return np.asarray(x)


def fit(config: TrainConfig, source, target, net: NetConfig | None = None, out_dir=None,
        state: TrainState | None = None, eval_fn: Callable[[TrainState], dict] | None = None) -> FitResult:
    """Run training up to ``config.steps`` total steps.

    With ``out_dir`` the loss trace (trace.csv), checkpoints every
    ``eval_every`` steps (plus the initial and final state) and periodic
    evaluation rows (eval.csv) are written there. Passing a resumed ``state``
    continues from its step counter.
    """
    source_x = _images(source)
    target_x = _images(target)
    if state is None:
        state = new_state(config, net)
    else:
        state.config = config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace: list[tuple[int, LossReport]] = []
    ckpts: list[Path] = []
    evals: list[dict] = []

    def checkpoint_now():
        if out is not None:
            ckpts.append(state.save(out / f"ckpt_{state.step:06d}.cdlm"))

    def evaluate_now():
        if eval_fn is not None:
            row = {"step": state.step, **eval_fn(state)}
            evals.append(row)
            log.info("eval %s", row)

    checkpoint_now()
    while state.step < config.steps:
        _, report = train_step(state, source_x, target_x)
        trace.append((state.step, report))
        if state.step % config.eval_every == 0 or state.step == config.steps:
            checkpoint_now()
            evaluate_now()
        if state.step % 100 == 0:
            log.info("step %d phi=%.4f theta=%.4f adv=%.4f", state.step, report.total_phi,
                     report.total_theta, report.adv)
    if out is not None:
        try:
            write_trace(out / "trace.csv", trace)
            if evals:
                with open(out / "eval.csv", "w", newline="") as fh:
                    w = csv.DictWriter(fh, fieldnames=list(evals[0]))
                    w.writeheader()
                    w.writerows(evals)
        except OSError as exc:
            raise UsageError(f"cannot write training outputs under {out}: {exc.strerror}") from exc
    return FitResult(state, trace, ckpts, evals)
