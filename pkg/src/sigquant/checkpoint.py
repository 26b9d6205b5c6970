"""Training checkpoints: an ``.npz`` archive of arrays plus a JSON metadata entry.

Floats in the metadata are written with ``repr`` precision and arrays keep
their dtype, so ``load(save(x))`` reproduces ``x`` bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import QuantParams
from .exceptions import ParseError
from .initializers import InitReport
from .nn import SGD, Network, Quantizer
from .training import TrainMetrics

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    network: Network
    opt: SGD | None = None
    epoch: int = 0
    metrics: TrainMetrics | None = None
    extra: dict = field(default_factory=dict)


def _quantizer_meta(q: Quantizer, layers):
    p = q.params
    return {
        "name": q.name,
        "kind": q.kind,
        "levels": list(q.levels.levels),
        "alpha": p.alpha,
        "beta": p.beta,
        "biases": p.biases.tolist(),
        "temperature": p.temperature,
        "alpha_learnable": p.alpha_learnable,
        "beta_learnable": p.beta_learnable,
        "biases_learnable": p.biases_learnable,
        "active": q.active,
        "trainable": q.trainable,
        "layers": layers,
        "report": q.report.to_dict() if q.report is not None else None,
    }


def save_checkpoint(path, network: Network, opt: SGD | None = None, epoch: int = 0,
                    metrics: TrainMetrics | None = None, extra: dict | None = None):
    arrays = {f"param/{k}": v for k, v in network.named_parameters().items()}
    owners: dict[int, list] = {}
    for layer in network.layers:
        for q in layer.quantizers():
            owners.setdefault(id(q), []).append(layer.name)
    meta = {
        "version": FORMAT_VERSION,
        "arch": network.arch,
        "layer_names": [l.name for l in network.layers],
        "trainable": {l.name: l.trainable for l in network.parameterized_layers()},
        "input_shape": list(network.input_shape),
        "quantizers": [_quantizer_meta(q, owners[id(q)]) for q in network.quantizers()],
        "epoch": int(epoch),
        "metrics": metrics.to_dict() if metrics is not None else None,
        "extra": extra or {},
        "opt": None,
    }
    if opt is not None:
        state = opt.state_dict()
        meta["opt"] = {k: state[k] for k in ("lr", "momentum", "weight_decay", "clip_norm", "max_scale_step")}
        meta["opt"]["buffers"] = sorted(state["buffers"])
        arrays.update({f"opt/{k}": v for k, v in state["buffers"].items()})
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
        meta = json.loads(str(archive["meta"]))
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: not a sigquant checkpoint ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    net = Network.from_arch(meta["arch"], meta["input_shape"])
    for layer, name in zip(net.layers, meta["layer_names"]):
        layer.name = name
    for key, value in net.named_parameters().items():
        value[...] = archive[f"param/{key}"]
    for layer in net.parameterized_layers():
        layer.trainable = meta["trainable"][layer.name]
    for qm in meta["quantizers"]:
        params = QuantParams(qm["alpha"], qm["beta"], qm["biases"], qm["temperature"],
                             qm["alpha_learnable"], qm["beta_learnable"], qm["biases_learnable"])
        report = InitReport.from_dict(qm["report"]) if qm["report"] else None
        q = Quantizer(qm["levels"], params, qm["name"], qm["kind"], active=qm["active"],
                      trainable=qm["trainable"], report=report)
        for lname in qm["layers"]:
            if qm["kind"] == "weight":
                net.attach_weight_quantizer(lname, q)
            else:
                net.layer(lname).activation_quantizer = q
    opt = None
    if meta["opt"] is not None:
        o = meta["opt"]
        opt = SGD(o["lr"], o["momentum"], o["weight_decay"], o["clip_norm"],
                  {k: np.array(archive[f"opt/{k}"]) for k in o["buffers"]}, o.get("max_scale_step"))
    metrics = TrainMetrics.from_dict(meta["metrics"]) if meta["metrics"] else None
    return Checkpoint(net, opt, meta["epoch"], metrics, meta["extra"])
