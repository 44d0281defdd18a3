"""Closed-loop novel-view protocol: fit, render shifted poses, refit on the renders, render back."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .beam import BeamProfile
from .field import VoxelGridField
from .geometry import AcceleratedScene
from .fit import (TrainConfig, TrainingRays, TwoReturnClassifier, fit_field, fit_two_return_classifier,
                  two_return_training_features)
from .metrics import MetricsReport, evaluate
from .render import render_scan
from .surfel import SurfelBaseline, SurfelConfig
from .types import LidarScan, ScanPattern, SensorPose
from .waveform import SensorConfig, simulate_sensor_scan

log = logging.getLogger(__name__)

SHIFT_PRESETS = {
    "default": (1.5, 1.5, 0.5),
    "0.5": (0.5, 0.5, 0.5),
    "1.5": (1.5, 1.5, 1.0),
    "2.5": (2.5, 2.5, 1.5),
}


def field_bounds_from_scans(scans, margin: float = 1.0):
    """Axis-aligned box around every return (first and second) plus ``margin``."""
    pts = [s.points(w, "world") for s in scans for w in ("first", "second")]
    pts = [p for p in pts if len(p)]
    if not pts:
        raise ValueError("scans contain no returns")
    pts = np.concatenate(pts)
    return pts.min(axis=0) - margin, pts.max(axis=0) + margin


@dataclass
class FieldMethod:
    """Voxel field fitted with the active-sensor losses.

    ``two_return_mode``: ``"logistic"`` fits the range-spread classifier after the field,
    ``"threshold"`` uses the fixed std rule, ``"none"`` renders single returns only.
    """

    train: TrainConfig = dc_field(default_factory=TrainConfig)
    voxel_size: float = 0.2
    bounds: Optional[tuple] = None
    margin: float = 1.0
    two_return_mode: str = "threshold"
    std_threshold: float = 0.3
    threads: int = 1
    field: Optional[VoxelGridField] = None
    classifier: Optional[TwoReturnClassifier] = None

    def fit(self, scans):
        scans = list(scans)
        lo, hi = self.bounds if self.bounds is not None else field_bounds_from_scans(scans, self.margin)
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        res = np.maximum(np.ceil((hi - lo) / self.voxel_size).astype(int) + 1, 2)
        init = VoxelGridField((lo, hi), res)
        self.field = fit_field(scans, init, self.train, threads=self.threads).field
        self.classifier = None
        if self.two_return_mode == "threshold":
            self.classifier = TwoReturnClassifier("threshold", std_threshold=self.std_threshold)
        elif self.two_return_mode == "logistic":
            feats, labels = two_return_training_features(self.field, TrainingRays.from_scans(scans), self.train)
            try:
                self.classifier = fit_two_return_classifier(feats, labels)
            except ValueError:
                log.info("no two-return labels in the training scans; falling back to the std threshold")
                self.classifier = TwoReturnClassifier("threshold", std_threshold=self.std_threshold)
        return self

    def render(self, poses, pattern: ScanPattern) -> list[LidarScan]:
        if self.field is None:
            raise RuntimeError("fit the field before rendering")
        profile = BeamProfile.preset(self.train.gamma0, self.train.subrays)
        return [render_scan(self.field, pattern, p, profile, self.train.render, self.classifier, self.threads)
                for p in poses]


class SurfelMethod(SurfelBaseline):
    pass


class SimulatorMethod:
    """Ground-truth passthrough: 'fitting' is a no-op and rendering re-runs the waveform simulator."""

    def __init__(self, scene: AcceleratedScene, sensor: SensorConfig, threads: int = 1):
        self.scene, self.sensor, self.threads = scene, sensor, threads

    def fit(self, scans):
        return self

    def render(self, poses, pattern: ScanPattern) -> list[LidarScan]:
        sensor = SensorConfig(pattern, self.sensor.pulse, self.sensor.detector, self.sensor.gamma0, self.sensor.subrays)
        return [simulate_sensor_scan(self.scene, sensor, p, self.threads) for p in poses]


@dataclass
class ClosedLoopResult:
    report: MetricsReport
    shifted_scans: list
    final_scans: list


def closed_loop(make_method: Callable[[], object], scans, shift=SHIFT_PRESETS["default"]) -> ClosedLoopResult:
    """Score a method by reconstructing the original views through a shifted trajectory."""
    scans = list(scans)
    if not scans:
        raise ValueError("closed loop needs at least one scan")
    pattern = scans[0].pattern
    poses = [s.pose for s in scans]
    shifted = [p.shifted(shift) for p in poses]
    first = make_method().fit(scans)
    renders = first.render(shifted, pattern)
    second = make_method().fit(renders)
    final = second.render(poses, pattern)
    return ClosedLoopResult(evaluate(final, scans), renders, final)
