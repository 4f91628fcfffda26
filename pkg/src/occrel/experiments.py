"""Seeded desk-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

from .calib import apply_calibrator, fit_calibrator
from .config import REFERENCE_SEED, CalibConfig, SceneConfig, TrainConfig
from .core import VoxelBatch
from .metrics import MetricReport, evaluate
from .toynet import ToyNet, generate_scenes, perturb, predict_dump, train
from .toynet.scenes import SceneDataset


@dataclass
class OnlineRun:
    mode: str
    net: ToyNet
    val: VoxelBatch
    test: VoxelBatch
    report: MetricReport
    curve: list


@dataclass
class Reference:
    scene: SceneConfig
    train: TrainConfig
    seed: int
    data: SceneDataset
    runs: Dict[str, OnlineRun] = field(default_factory=dict)


def run_online(modes: Iterable[str] = ("baseline", "reliocc"), seed: int = REFERENCE_SEED,
               scene: Optional[SceneConfig] = None, cfg: Optional[TrainConfig] = None) -> Reference:
    """Train one network per mode on the same scenes and evaluate on test.

    Metrics use 1 - confidence as the uncertainty for every mode, so the
    comparison is between the probabilities the models produce.
    """
    scene = scene or SceneConfig()
    cfg = cfg or TrainConfig()
    data = generate_scenes(scene, seed)
    ref = Reference(scene, cfg, seed, data)
    for mode in modes:
        net = ToyNet(scene.feature_dim, scene.num_classes, cfg.hidden, cfg.dropout, seed=seed,
                     with_dul=mode == "dul")
        result = train(net, data.train, cfg.epochs, mode, seed, cfg)
        test = predict_dump(net, data.test, mode, seed, cfg.mc_samples)
        val = predict_dump(net, data.val, mode, seed, cfg.mc_samples)
        ref.runs[mode] = OnlineRun(mode, net, val, test, evaluate(test), result.curve)
    return ref


def run_offline(run: OnlineRun, kinds: Iterable[str], cfg: Optional[CalibConfig] = None
                ) -> Dict[str, MetricReport]:
    """Fit each calibrator on the val dump of ``run`` and evaluate on its test dump."""
    out = {"uncalibrated": run.report}
    for kind in kinds:
        params = fit_calibrator(kind, run.val, cfg)
        out[kind] = evaluate(run.test, probs=apply_calibrator(params, run.test))
    return out


def logit_noise_sweep(run: OnlineRun, magnitudes: Iterable[float], seed: int = REFERENCE_SEED
                      ) -> Dict[float, MetricReport]:
    return {m: evaluate(perturb(run.test, "logit_noise", m, seed)) for m in magnitudes}


def input_perturbation_sweep(ref: Reference, run: OnlineRun, kind: str,
                             magnitudes: Iterable[float]) -> Dict[float, MetricReport]:
    """Corrupt the test scenes' sensor input and re-run the trained network."""
    out = {}
    for m in magnitudes:
        corrupted = perturb(ref.data.test, kind, m, ref.seed)
        out[m] = evaluate(predict_dump(run.net, corrupted, run.mode, ref.seed, ref.train.mc_samples))
    return out
