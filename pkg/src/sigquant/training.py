"""Quantization-aware training: quantizer insertion, annealed temperature,
three-phase schedule, per-epoch diagnostics and freezing for inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import QuantLevels, relaxation_gap
from .exceptions import ConfigurationError, DivergenceError, NumericError
from .inference import InferenceModel
from .initializers import calibrate_activation_range, initialize_quantizer
from .nn import SGD, Network, Quantizer, softmax_cross_entropy

log = logging.getLogger(__name__)

__all__ = [
    "EpochRecord",
    "Phase",
    "PhasePlan",
    "StepLR",
    "TemperatureSchedule",
    "TrainMetrics",
    "ablation_suite",
    "build_quantized_network",
    "evaluate",
    "finalize",
    "quantizer_gap",
    "train",
    "train_float",
]


@dataclass(frozen=True)
class TemperatureSchedule:
    """``T(epoch) = rate * epoch`` for 1-based epochs."""

    rate: float = 10.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigurationError(f"temperature rate must be positive, got {self.rate}")

    def __call__(self, epoch: int) -> float:
        if epoch < 1:
            raise ConfigurationError("epochs are numbered from 1")
        return self.rate * epoch


@dataclass(frozen=True)
class StepLR:
    base_lr: float
    milestones: tuple = ()
    factor: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.base_lr * self.factor ** sum(epoch >= m for m in self.milestones)


@dataclass(frozen=True)
class Phase:
    name: str
    start: int
    end: int
    quantize_weights: bool = True
    quantize_activations: bool = True
    train_weights: bool = True
    train_weight_quantizers: bool = True
    train_activation_quantizers: bool = True


PHASE_TEMPLATES = {
    "weights": dict(quantize_activations=False, train_activation_quantizers=False),
    "activations": dict(train_weights=False, train_weight_quantizers=False),
    "joint": dict(),
}


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple

    def __post_init__(self):
        expect = 1
        for p in self.phases:
            if p.start != expect or p.end < p.start:
                raise ConfigurationError(f"phase {p.name!r} spans [{p.start}, {p.end}]; phases must tile the epochs")
            expect = p.end + 1

    @property
    def epochs(self) -> int:
        return self.phases[-1].end if self.phases else 0

    @classmethod
    def default(cls, epochs: int, split=(0.4, 0.2, 0.4), with_activations: bool = True) -> "PhasePlan":
        """Weights-only, activations-only, then joint training.

        Without activation quantizers the middle phase has nothing to train
        and is dropped; its share goes to the joint phase.
        """
        if epochs < 1:
            raise ConfigurationError("need at least one epoch")
        names = ["weights", "activations", "joint"]
        shares = list(split)
        if len(shares) != 3 or min(shares) < 0 or sum(shares) <= 0:
            raise ConfigurationError(f"phase split must be three non-negative shares, got {split}")
        if not with_activations:
            names, shares = ["weights", "joint"], [shares[0], shares[1] + shares[2]]
        total = sum(shares)
        bounds = np.round(np.cumsum(shares) / total * epochs).astype(int)
        phases, start = [], 1
        for name, end in zip(names, bounds):
            if end >= start:
                phases.append(Phase(name, start, int(end), **PHASE_TEMPLATES[name]))
                start = int(end) + 1
        return cls(tuple(phases))

    @classmethod
    def single(cls, epochs: int) -> "PhasePlan":
        return cls((Phase("joint", 1, epochs),))

    def phase_for(self, epoch: int) -> Phase:
        for p in self.phases:
            if p.start <= epoch <= p.end:
                return p
        return self.phases[-1]

    def to_list(self):
        return [asdict(p) for p in self.phases]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(Phase(**d) for d in items))


@dataclass
class EpochRecord:
    epoch: int
    T: float
    train_loss: float
    train_acc: float
    val_acc_soft: float
    val_acc_hard: float
    phase: str = ""
    gaps: list = field(default_factory=list)


@dataclass
class TrainMetrics:
    records: list = field(default_factory=list)
    gap_names: list = field(default_factory=list)

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]

    def header(self):
        return ["epoch", "T", "train_loss", "train_acc", "val_acc_soft", "val_acc_hard"] + [
            f"gap_layer_{i}" for i in range(len(self.gap_names))
        ]

    def rows(self):
        for r in self.records:
            yield [r.epoch, r.T, r.train_loss, r.train_acc, r.val_acc_soft, r.val_acc_hard, *r.gaps]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def to_dict(self):
        return {"records": [asdict(r) for r in self.records], "gap_names": list(self.gap_names)}

    @classmethod
    def from_dict(cls, d):
        return cls([EpochRecord(**r) for r in d["records"]], list(d["gap_names"]))


def _activation_site(network: Network, layer_idx: int):
    """Index of the post-ReLU (or post-pool) layer feeding ``layer_idx``, if any."""
    j = layer_idx - 1
    while j >= 0 and network.layers[j].kind == "flatten":
        j -= 1
    if j < 0 or not network._post_relu(j):
        return None
    # Quantize after pooling when a ReLU -> pool chain feeds the layer.
    return j


def build_quantized_network(
    base: Network,
    levels_w,
    levels_a=None,
    calib=None,
    seed: int = 0,
    *,
    method: str = "kmeans",
    shared: bool = False,
    quantize_first_last: bool = False,
    calib_samples: int = 1000,
    temperature: float = 1.0,
) -> Network:
    """Copy ``base`` and attach initialized layer-wise (or shared) quantizers.

    Weight quantizers go on every parameterized layer except the first and
    last. When ``levels_a`` is given, the post-ReLU activation feeding each
    weight-quantized layer gets an activation quantizer calibrated on up to
    ``calib_samples`` rows of ``calib``.
    """
    net = base.copy()
    for layer in net.layers:
        layer.weight_quantizer = layer.activation_quantizer = None
        layer.trainable = True
    levels_w = QuantLevels.from_spec(levels_w)
    levels_a = QuantLevels.from_spec(levels_a) if levels_a is not None else None
    weighted = [i for i, l in enumerate(net.layers) if l.has_params]
    targets = weighted if quantize_first_last else weighted[1:-1]
    if not targets:
        raise ConfigurationError("network has no interior parameterized layers to quantize")

    w_params = {}
    if shared:
        pool = np.concatenate([net.layers[i].weight.ravel() for i in targets])
        params, report = initialize_quantizer(levels_w, pool, kind="weight", method=method, seed=seed)
        q = Quantizer(levels_w, params.replace(temperature=temperature), "shared.wq", "weight", report=report)
        for i in targets:
            net.attach_weight_quantizer(net.layers[i].name, q)
    else:
        for i in targets:
            layer = net.layers[i]
            params, report = initialize_quantizer(levels_w, layer.weight, kind="weight", method=method, seed=seed)
            w_params[layer.name] = params
            net.attach_weight_quantizer(
                layer.name,
                Quantizer(levels_w, params.replace(temperature=temperature), f"{layer.name}.wq", "weight",
                          report=report),
            )

    if levels_a is not None:
        if calib is None:
            raise ConfigurationError("activation quantization needs a calibration sample")
        calib = np.asarray(calib, dtype=np.float64)
        if len(calib) > calib_samples:
            calib = calib[np.sort(np.random.default_rng(seed).choice(len(calib), calib_samples, replace=False))]
        sites = sorted({s for s in (_activation_site(net, i) for i in targets) if s is not None})
        if shared and sites:
            acts = np.concatenate([net.activations(calib, s).ravel() for s in sites])
            for s in sites:
                calibrate_activation_range(net, calib, s)
            params, report = initialize_quantizer(levels_a, acts, kind="activation", method=method, seed=seed)
            q = Quantizer(levels_a, params.replace(temperature=temperature), "shared.aq", "activation",
                          report=report)
            for s in sites:
                net.attach_activation_quantizer(net.layers[s].name, q)
        else:
            for s in sites:
                calibrate_activation_range(net, calib, s)
                acts = net.activations(calib, s)
                params, report = initialize_quantizer(levels_a, acts, kind="activation", method=method, seed=seed)
                name = net.layers[s].name
                net.attach_activation_quantizer(
                    name,
                    Quantizer(levels_a, params.replace(temperature=temperature), f"{name}.aq", "activation",
                              report=report),
                )
    return net


def quantizer_gap(q: Quantizer, grid_points: int = 2001) -> float:
    """Relaxation gap of ``q`` in level units over a domain fixed by its biases and beta."""
    p = q.params
    lo, hi = (p.biases[0] - 2.0) / p.beta, (p.biases[-1] + 2.0) / p.beta
    return relaxation_gap(q.levels, p, (lo, hi), grid_points, 0.05 / p.beta) / p.alpha


def _apply_phase(network: Network, phase: Phase):
    for layer in network.parameterized_layers():
        layer.trainable = phase.train_weights
    for q in network.weight_quantizers():
        q.active = phase.quantize_weights
        q.trainable = phase.train_weight_quantizers
    for q in network.activation_quantizers():
        q.active = phase.quantize_activations
        q.trainable = phase.train_activation_quantizers


def evaluate(network: Network, X, y, mode: str = "hard", batch_size: int = 512) -> float:
    """Top-1 accuracy in percent."""
    if len(y) == 0:
        return float("nan")
    pred = network.predict(X, mode, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y))) * 100.0


def train(
    network: Network,
    train_data,
    val_data,
    plan: PhasePlan | None = None,
    schedule: TemperatureSchedule | None = None,
    opt: SGD | None = None,
    epochs: int | None = None,
    seed: int = 0,
    *,
    batch_size: int = 64,
    lr_schedule: StepLR | None = None,
    start_epoch: int = 1,
    metrics: TrainMetrics | None = None,
    on_epoch_end=None,
):
    """Run the annealed phase schedule; returns ``(network, metrics)``.

    ``train_data`` / ``val_data`` are objects with ``X`` and ``y``. The batch
    order of epoch ``e`` depends only on ``(seed, e)``, so a run resumed from
    a checkpoint at epoch ``e - 1`` reproduces the uninterrupted run.
    ``on_epoch_end(epoch, network, opt, metrics)`` is called after each epoch.
    """
    schedule = schedule or TemperatureSchedule()
    opt = opt or SGD()
    if epochs is None:
        epochs = plan.epochs if plan else 1
    if plan is None:
        plan = PhasePlan.default(epochs, with_activations=bool(network.activation_quantizers()))
    lr_schedule = lr_schedule or StepLR(opt.lr)
    quantizers = network.quantizers()
    metrics = metrics or TrainMetrics(gap_names=[q.name for q in quantizers])
    X, y = np.asarray(train_data.X), np.asarray(train_data.y)

    for epoch in range(start_epoch, epochs + 1):
        t = schedule(epoch)
        network.set_temperature(t)
        phase = plan.phase_for(epoch)
        _apply_phase(network, phase)
        opt.lr = lr_schedule(epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(len(y))
        total_loss, correct = 0.0, 0
        for lo in range(0, len(y), batch_size):
            idx = perm[lo:lo + batch_size]
            try:
                logits, tape = network.forward(X[idx], "soft")
            except NumericError as exc:
                raise DivergenceError(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            total_loss += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y[idx]))
            opt.step(network, network.backward(tape, dlogits))
        train_loss = total_loss / len(y)
        if not np.isfinite(train_loss):
            raise DivergenceError(epoch)
        rec = EpochRecord(
            epoch=epoch,
            T=t,
            train_loss=train_loss,
            train_acc=100.0 * correct / len(y),
            val_acc_soft=evaluate(network, val_data.X, val_data.y, "soft"),
            val_acc_hard=evaluate(network, val_data.X, val_data.y, "hard"),
            phase=phase.name,
            gaps=[quantizer_gap(q) for q in quantizers],
        )
        metrics.records.append(rec)
        log.info("epoch %d T=%g phase=%s loss=%.4f train=%.2f soft=%.2f hard=%.2f",
                 epoch, t, phase.name, train_loss, rec.train_acc, rec.val_acc_soft, rec.val_acc_hard)
        if on_epoch_end is not None:
            on_epoch_end(epoch, network, opt, metrics)
    return network, metrics


def finalize(network: Network) -> InferenceModel:
    """Switch every quantizer to the step form and freeze weights as integer codes."""
    for q in network.quantizers():
        q.active = True
    return network.to_inference()


def train_float(network: Network, train_data, val_data, epochs: int, seed: int = 0, *,
                lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 5e-4,
                clip_norm: float | None = 5.0, batch_size: int = 64, milestones=()):
    """Plain full-precision training (no quantizers) with the same loop."""
    opt = SGD(lr, momentum, weight_decay, clip_norm)
    return train(network, train_data, val_data, PhasePlan.single(epochs), TemperatureSchedule(1.0),
                 opt, epochs, seed, batch_size=batch_size, lr_schedule=StepLR(lr, tuple(milestones)))


@dataclass
class AblationConfig:
    arch: str
    levels_w: str = "3bit±4"
    levels_a: str | None = None
    pretrain_epochs: int = 10
    epochs: int = 10
    temperature_rate: float = 10.0
    lr: float = 0.05
    qat_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float | None = 5.0
    batch_size: int = 64
    seed: int = 0
    pretrain_milestones: tuple = ()
    milestones: tuple = ()
    max_scale_step: float | None = None


def _qat(base, cfg: AblationConfig, train_data, val_data, **build_kw):
    net = build_quantized_network(base, cfg.levels_w, cfg.levels_a, train_data.X, cfg.seed, **build_kw)
    opt = SGD(cfg.qat_lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm, max_scale_step=cfg.max_scale_step)
    plan = PhasePlan.default(cfg.epochs, with_activations=cfg.levels_a is not None)
    net, metrics = train(net, train_data, val_data, plan, TemperatureSchedule(cfg.temperature_rate), opt,
                         cfg.epochs, cfg.seed, batch_size=cfg.batch_size,
                         lr_schedule=StepLR(cfg.qat_lr, cfg.milestones))
    return metrics.last.val_acc_hard


def ablation_suite(cfg: AblationConfig, train_data, val_data) -> list[dict]:
    """Paired runs: k-means vs linear biases, layer-wise vs shared, pre-trained vs scratch.

    Each row reports both hard-mode validation accuracies, their difference
    and whether the expected direction (first variant >= second) held.
    """
    fresh = Network.from_arch(cfg.arch, train_data.input_shape, cfg.seed)
    pretrained, _ = train_float(fresh.copy(), train_data, val_data, cfg.pretrain_epochs, cfg.seed,
                                lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                                clip_norm=cfg.clip_norm, batch_size=cfg.batch_size,
                                milestones=cfg.pretrain_milestones)
    reference = _qat(pretrained, cfg, train_data, val_data)
    linear = _qat(pretrained, cfg, train_data, val_data, method="linear")
    shared = _qat(pretrained, cfg, train_data, val_data, shared=True)
    scratch = _qat(fresh, cfg, train_data, val_data)
    rows = []
    for name, a_name, a, b_name, b in (
        ("bias initialization", "non-uniform", reference, "linear", linear),
        ("quantizer sharing", "layer-wise", reference, "shared", shared),
        ("starting point", "pre-trained", reference, "scratch", scratch),
    ):
        rows.append({"ablation": name, "variant_a": a_name, "acc_a": a, "variant_b": b_name, "acc_b": b,
                     "difference": a - b, "expected": f"{a_name} >= {b_name}", "holds": bool(a >= b)})
    return rows
