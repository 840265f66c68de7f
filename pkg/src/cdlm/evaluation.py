"""Quantitative evaluation: adaptation accuracy, proxy A-distance, moment checks,
image metrics, embedding export and ablation grids."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import tensor as T
from .data import DomainBatch, DomainPair
from .errors import ConfigurationError, DimensionError, UsageError
from .model import CDLM, DeepRep, Domain, DomainInfo, NetConfig, closed_form_moments, modulate
from .optim import Adam
from .params import ParamSet, fan_in_uniform
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- source classifier -------------------------------------------------------------
class Classifier:
    """Two strided convs and a hidden dense layer; trained with Adam on cross-entropy."""

    def __init__(self, image_shape: tuple[int, int, int], num_classes: int, seed: int = 0,
                 width: int = 16, hidden: int = 64):
        c, h, w = image_shape
        rng = np.random.default_rng(seed)
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        p = self.params = ParamSet()
        gain = np.sqrt(2.0 / (1.0 + 0.2 ** 2))
        p.add("conv1.w", fan_in_uniform(rng, (width, c, 3, 3), c * 9, gain), "encoder")
        p.add("conv1.b", np.zeros(width, np.float32), "encoder")
        p.add("conv2.w", fan_in_uniform(rng, (2 * width, width, 3, 3), width * 9, gain), "encoder")
        p.add("conv2.b", np.zeros(2 * width, np.float32), "encoder")
        h2 = T.conv_output_size(T.conv_output_size(h, 3, 2, 1), 3, 2, 1)
        w2 = T.conv_output_size(T.conv_output_size(w, 3, 2, 1), 3, 2, 1)
        flat = 2 * width * h2 * w2
        p.add("fc1.w", fan_in_uniform(rng, (hidden, flat), flat, gain), "encoder")
        p.add("fc1.b", np.zeros(hidden, np.float32), "encoder")
        p.add("fc2.w", fan_in_uniform(rng, (num_classes, hidden), hidden), "encoder")
        p.add("fc2.b", np.zeros(num_classes, np.float32), "encoder")

    def logits(self, x: Tensor) -> Tensor:
        p = self.params
        a = T.leaky_relu(T.conv2d(x, p["conv1.w"], p["conv1.b"], 2, 1))
        a = T.leaky_relu(T.conv2d(a, p["conv2.w"], p["conv2.b"], 2, 1))
        a = T.leaky_relu(T.linear(T.flatten(a), p["fc1.w"], p["fc1.b"]))
        return T.linear(a, p["fc2.w"], p["fc2.b"])

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.shape[1:] != self.image_shape:
            raise ConfigurationError(f"classifier expects {self.image_shape} images, got {x.shape[1:]}")
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.logits(Tensor(x[i:i + batch_size])).data.argmax(axis=1))
        return np.concatenate(out)

    def accuracy(self, batch: DomainBatch) -> float:
        if batch.labels is None:
            raise UsageError("accuracy needs labels")
        return float(np.mean(self.predict(batch.images) == batch.labels))


def train_source_classifier(train: DomainBatch, seed: int = 0, epochs: int = 8, batch_size: int = 64,
                            lr: float = 2e-3, num_classes: int | None = None) -> Classifier:
    """Fit a Classifier on labelled images (also used for the target-only bound)."""
    if train.labels is None:
        raise UsageError("classifier training needs labels")
    k = num_classes or train.num_classes
    clf = Classifier(train.image_shape, k, seed=seed)
    opt = Adam(clf.params.partition("encoder"), lr)
    rng = np.random.default_rng(seed + 7)
    x = train.images.astype(np.float32)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            idx = order[i:i + batch_size]
            clf.params.zero_grad()
            loss = T.cross_entropy(clf.logits(Tensor(x[idx])), train.labels[idx])
            loss.backward()
            opt.step(clf.params.grads("encoder"))
    clf.params.zero_grad()
    return clf


def adaptation_accuracy(model: CDLM, classifier: Classifier, target_test: DomainBatch,
                        gamma1: float = 1.0, gamma2: float = 0.1, seed: int = 0) -> float:
    """Classifier accuracy on test-mode adapted target images.

    Adaptation sees only the images; labels are read afterwards for scoring.
    """
    if target_test.labels is None:
        raise UsageError("scoring needs target labels")
    if target_test.labels.max() >= classifier.num_classes:
        raise ConfigurationError(
            f"target labels reach {target_test.labels.max()} but classifier has {classifier.num_classes} classes")
    adapted = model.adapt_array(target_test.unlabeled().images, gamma1, gamma2, seed=seed)
    return float(np.mean(classifier.predict(adapted) == target_test.labels))


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float]:
    return [float(np.mean(pred[labels == c] == c)) if np.any(labels == c) else float("nan")
            for c in range(num_classes)]


# -- proxy A-distance ---------------------------------------------------------------
def a_distance(features_s: np.ndarray, features_t: np.ndarray, seed: int = 0, test_fraction: float = 0.5,
               C: float = 1.0) -> float:
    """2 * (1 - 2 * err) of a held-out linear domain probe, clamped to [0, 2]."""
    fs = np.asarray(features_s, dtype=np.float64).reshape(len(features_s), -1)
    ft = np.asarray(features_t, dtype=np.float64).reshape(len(features_t), -1)
    if len(fs) < 2 or len(ft) < 2:
        raise UsageError("a_distance needs at least two samples per domain")
    x = np.concatenate([fs, ft])
    y = np.concatenate([np.zeros(len(fs)), np.ones(len(ft))])
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == label))
        cut = max(1, min(len(idx) - 1, int(round(len(idx) * (1 - test_fraction)))))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    mean, std = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    probe = LogisticRegression(C=C, max_iter=2000)
    probe.fit((x[tr] - mean) / std, y[tr])
    err = 1.0 - probe.score((x[te] - mean) / std, y[te])
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


# -- moment identity -------------------------------------------------------------------
@dataclass
class MomentEstimate:
    """Empirical per-coordinate moments of a batch of deep representations."""

    mu_h: np.ndarray
    sigma_h: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_h) < 0):
            raise ConfigurationError("sigma_h must be non-negative")

    @classmethod
    def from_samples(cls, h: np.ndarray) -> "MomentEstimate":
        h = np.asarray(h, dtype=np.float64)
        return cls(h.mean(axis=0), h.std(axis=0))


@dataclass
class MomentReport:
    mean_z: np.ndarray
    var_z: np.ndarray
    max_abs_z: float
    n_samples: int
    estimate: MomentEstimate

    @property
    def passed(self) -> bool:
        return self.max_abs_z <= 3.0


def verify_moments(model: CDLM, target_images: np.ndarray, gamma1: float, gamma2: float,
                   n_samples: int = 100_000, seed: int = 0, closed_form=closed_form_moments,
                   info_row: int = 0) -> MomentReport:
    """Monte-Carlo check of the modulated-latent moments against ``closed_form``.

    h is drawn by resampling rows of the batch's deep representations, so its
    population moments are exactly the batch moments fed to the closed form.
    The moments (mu, sigma) come from row ``info_row`` of the same batch.
    Returns per-coordinate z-scores for the mean and the variance.
    """
    if n_samples < 1000:
        raise UsageError(f"verify_moments needs at least 1000 samples, got {n_samples}")
    x = np.asarray(target_images, dtype=np.float64)
    net = model.clone(np.float64)
    with T.no_grad():
        info, rep = net.encode(Tensor(x))
    h = rep.h.data
    est = MomentEstimate.from_samples(h)
    row = DomainInfo(Tensor(info.mu.data[info_row:info_row + 1]), Tensor(info.log_sigma.data[info_row:info_row + 1]))
    rng = np.random.default_rng(seed)
    draws = h[rng.integers(0, len(h), size=n_samples)]
    eps = rng.standard_normal(draws.shape)
    with T.no_grad():
        many = DomainInfo(T.broadcast_to(row.mu, draws.shape), T.broadcast_to(row.log_sigma, draws.shape))
        z = modulate(many, DeepRep(Tensor(draws)), Tensor(eps), gamma1, gamma2,
                     Domain.SOURCE, Domain.TARGET, diagnostic=True).z.data
        mu_cf, sigma_cf = closed_form(row, (est.mu_h, est.sigma_h), gamma1, gamma2)
    mu_cf = np.asarray(getattr(mu_cf, "data", mu_cf), dtype=np.float64)[0]
    var_cf = np.asarray(getattr(sigma_cf, "data", sigma_cf), dtype=np.float64)[0] ** 2
    centred = z - z.mean(axis=0)
    var_mc = np.mean(centred ** 2, axis=0)
    m4 = np.mean(centred ** 4, axis=0)
    se_mean = np.sqrt(np.maximum(var_mc, 1e-300) / n_samples)
    se_var = np.sqrt(np.maximum(m4 - var_mc ** 2, 1e-300) / n_samples)
    mean_z = (z.mean(axis=0) - mu_cf) / se_mean
    # zero-variance coordinates: exact agreement or an infinite score
    var_diff = var_mc - var_cf
    tiny = var_mc <= 1e-24
    var_z = np.where(tiny, np.where(np.abs(var_diff) <= 1e-20, 0.0, np.inf), var_diff / se_var)
    mean_z = np.where(tiny, np.where(np.abs(z.mean(axis=0) - mu_cf) <= 1e-10, 0.0, np.inf), mean_z)
    worst = float(np.max(np.abs(np.concatenate([mean_z, var_z]))))
    return MomentReport(mean_z, var_z, worst, n_samples, est)


# -- image metrics -----------------------------------------------------------------
def image_metrics(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(mse, psnr) for images in [0, 1]; psnr is ``math.inf`` when mse == 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image_metrics: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return mse, psnr


# -- embedding export ---------------------------------------------------------------
def transfer_embeddings(model: CDLM, source: DomainBatch, target: DomainBatch, gamma1: float = 1.0,
                        gamma2: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cross-modulated latents for both domains.

    Row i of one domain is paired with row (i mod n_other) of the other.
    Returns (domain tags, labels or -1, latents).
    """
    rng = np.random.default_rng(seed)
    with T.no_grad():
        info_s, rep_s = model.encode(Tensor(source.images.astype(model.dtype)))
        info_t, rep_t = model.encode(Tensor(target.images.astype(model.dtype)))
        h_t = Tensor(rep_t.h.data[np.arange(len(source)) % len(target)])
        h_s = Tensor(rep_s.h.data[np.arange(len(target)) % len(source)])
        eps_s = Tensor(rng.standard_normal(info_s.mu.shape).astype(model.dtype))
        eps_t = Tensor(rng.standard_normal(info_t.mu.shape).astype(model.dtype))
        z_st = modulate(info_s, DeepRep(h_t), eps_s, gamma1, gamma2, Domain.SOURCE, Domain.TARGET).z.data
        z_ts = modulate(info_t, DeepRep(h_s), eps_t, gamma1, gamma2, Domain.TARGET, Domain.SOURCE).z.data
    tags = np.array([Domain.SOURCE.value] * len(source) + [Domain.TARGET.value] * len(target))

    def labels_of(b: DomainBatch) -> np.ndarray:
        return b.labels if b.labels is not None else np.full(len(b), -1)

    labels = np.concatenate([labels_of(source), labels_of(target)])
    return tags, labels, np.concatenate([z_st, z_ts])


def export_embeddings(model: CDLM, source: DomainBatch, target: DomainBatch, path, gamma1: float = 1.0,
                      gamma2: float = 0.1, seed: int = 0) -> Path:
    """Write ``domain,label,z0..z{d-1}`` rows, one per image, for external plotting."""
    tags, labels, z = transfer_embeddings(model, source, target, gamma1, gamma2, seed)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"z{i}" for i in range(z.shape[1])])
        for tag, label, row in zip(tags, labels, z):
            w.writerow([tag, int(label)] + [f"{v:.6g}" for v in row])
    return path


# -- full report -----------------------------------------------------------------------
@dataclass
class EvalReport:
    source_only_acc: float
    adapted_acc: float
    target_only_acc: float
    a_distance_raw: float
    a_distance_cdlm: float
    mse: float
    psnr: float
    per_class: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("source_only_acc", "adapted_acc", "target_only_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} = {v} outside [0, 1]")
        for name in ("a_distance_raw", "a_distance_cdlm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 2.0:
                raise ConfigurationError(f"{name} = {v} outside [0, 2]")

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)

    def rows(self) -> list[tuple[str, str]]:
        out = [(k, repr(v)) for k, v in asdict(self).items() if k != "per_class"]
        out.append(("psnr_infinite", str(self.psnr_infinite)))
        out += [(f"class_{i}_acc", repr(v)) for i, v in enumerate(self.per_class)]
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows(self.rows())
        return path


def evaluate(model: CDLM, pair: DomainPair, classifier: Classifier, target_only: Classifier | None = None,
             gamma1: float = 1.0, gamma2: float = 0.1, seed: int = 0, with_a_distance: bool = True,
             a_distance_on: str = "h") -> EvalReport:
    """All headline numbers for one trained model.

    mse/psnr compare source test images with their cross-modulated
    reconstructions; a-distances use the test splits, probing either the deep
    representations (``a_distance_on="h"``) or test-mode generations of both
    domains (``"decoded"``). Without ``target_only`` its accuracy reads 0.
    """
    if a_distance_on not in ("h", "decoded"):
        raise ConfigurationError(f"a_distance_on must be 'h' or 'decoded', got {a_distance_on!r}")
    src, tgt = pair.source_test, pair.target_test
    adapted = model.adapt_array(tgt.unlabeled().images, gamma1, gamma2, seed=seed)
    pred = classifier.predict(adapted)
    adapted_acc = float(np.mean(pred == tgt.labels))
    rng = np.random.default_rng(seed + 1)
    recon = []
    with T.no_grad():
        for i in range(0, len(src), 256):
            xs = Tensor(src.images[i:i + 256].astype(model.dtype))
            xt = Tensor(tgt.images[np.arange(i, i + len(xs.data)) % len(tgt)].astype(model.dtype))
            info_s, _ = model.encode(xs)
            _, rep_t = model.encode(xt)
            eps = Tensor(rng.standard_normal(info_s.mu.shape).astype(model.dtype))
            recon.append(model.decode(modulate(info_s, rep_t, eps, gamma1, gamma2)).data)
    mse, psnr = image_metrics(np.concatenate(recon), src.images)
    if with_a_distance:
        d_raw = a_distance(src.images, tgt.images, seed=seed)
        if a_distance_on == "h":
            fs, ft = model.features(src.images), model.features(tgt.images)
        else:
            fs = model.adapt_array(src.images, gamma1, gamma2, seed=seed)
            ft = model.adapt_array(tgt.images, gamma1, gamma2, seed=seed + 1)
        d_cdlm = a_distance(fs, ft, seed=seed)
    else:
        d_raw = d_cdlm = 0.0
    return EvalReport(
        source_only_acc=classifier.accuracy(tgt),
        adapted_acc=adapted_acc,
        target_only_acc=target_only.accuracy(tgt) if target_only is not None else 0.0,
        a_distance_raw=d_raw,
        a_distance_cdlm=d_cdlm,
        mse=mse,
        psnr=psnr,
        per_class=per_class_accuracy(pred, tgt.labels, classifier.num_classes),
    )


def write_adaptation_mosaic(model: CDLM, target: DomainBatch, path, gamma1: float = 1.0, gamma2: float = 0.1,
                            n: int = 16, seed: int = 0) -> Path:
    """PPM grid: target images on odd rows, their adapted versions beneath."""
    from .io import write_mosaic

    x = target.images[:n]
    y = model.adapt_array(x, gamma1, gamma2, seed=seed)
    cols = min(8, len(x))
    tiles = []
    for i in range(0, len(x), cols):
        tiles += [x[i:i + cols], y[i:i + cols]]
    write_mosaic(path, np.concatenate(tiles), cols=cols)
    return Path(path)


# -- ablations -------------------------------------------------------------------------
GAMMA_PAIRS = ((0.1, 1.0), (0.5, 0.5), (0.9, 0.1), (1.0, 0.1), (1.0, 0.0))
CONSISTENCY_VARIANTS = ("none", "Lc_t", "Lc_s", "both")


@dataclass
class AblationCell:
    family: str
    label: str
    train: object  # TrainConfig
    net: NetConfig

    @property
    def gammas(self) -> tuple[float, float]:
        return self.train.gamma1, self.train.gamma2


def gamma_grid(base, net: NetConfig) -> list[AblationCell]:
    return [AblationCell("gamma", f"({g1},{g2})", base.replace(gamma1=g1, gamma2=g2), net) for g1, g2 in GAMMA_PAIRS]


def consistency_grid(base, net: NetConfig) -> list[AblationCell]:
    weights = {"none": (0.0, 0.0), "Lc_t": (0.0, base.beta2), "Lc_s": (base.beta1, 0.0),
               "both": (base.beta1, base.beta2)}
    return [AblationCell("consistency", v, base.replace(beta1=weights[v][0], beta2=weights[v][1]), net)
            for v in CONSISTENCY_VARIANTS]


def depth_grid(base, net: NetConfig) -> list[AblationCell]:
    n = len(net.conv)
    taps = sorted({max(1, n - 2), max(1, n - 1), n})
    return [AblationCell("depth", "last" if t == n else f"conv{t}", base, replace_net(net, h_tap=t)) for t in taps]


def replace_net(net: NetConfig, **changes) -> NetConfig:
    return NetConfig.from_dict({**net.to_dict(), **changes})


ABLATION_HEADER = ["family", "label", "gamma1", "gamma2", "beta1", "beta2", "h_tap", "steps", "seed",
                   "adapted_acc", "seconds", "error"]


def run_cell(cell: AblationCell, pair: DomainPair, classifier: Classifier, out_dir=None) -> dict:
    """Train one grid cell and score it; failures are captured in ``error``."""
    from .trainer import fit

    t0 = time.perf_counter()
    row = {"family": cell.family, "label": cell.label, "gamma1": cell.train.gamma1, "gamma2": cell.train.gamma2,
           "beta1": cell.train.beta1, "beta2": cell.train.beta2, "h_tap": cell.net.tap_layer,
           "steps": cell.train.steps, "seed": cell.train.seed, "adapted_acc": "", "error": ""}
    try:
        result = fit(cell.train, pair.source_train, pair.target_train, net=cell.net, out_dir=out_dir)
        g1, g2 = cell.gammas
        row["adapted_acc"] = adaptation_accuracy(result.state.model, classifier, pair.target_test, g1, g2,
                                                 seed=cell.train.seed)
    except Exception as exc:  # noqa: BLE001 - every cell failure is reported, never fatal
        log.warning("ablation cell %s/%s failed: %s", cell.family, cell.label, exc)
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    row["seconds"] = round(time.perf_counter() - t0, 2)
    return row


def _run_cell_args(args):
    return run_cell(*args)


def run_ablations(cells: list[AblationCell], pair: DomainPair, classifier: Classifier, out_csv=None,
                  jobs: int = 1, cell_dirs=None) -> list[dict]:
    """Train and score every cell; one CSV row per cell in grid order."""
    dirs = list(cell_dirs) if cell_dirs is not None else [None] * len(cells)
    work = [(c, pair, classifier, d) for c, d in zip(cells, dirs)]
    if jobs > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_args, work))
    else:
        rows = [run_cell(*w) for w in work]
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
            w.writeheader()
            w.writerows(rows)
    return rows


def read_ablation_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
