"""Engine configuration: one JSON document, validated fully before any side
effect. Only the reviewer endpoint and the parallelism may be overridden
from the environment, keeping rounds reproducible."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .outer_loop import (
    DualGateConfig,
    GuardSpec,
    InnerGateConfig,
    OuterLoopError,
    RoundConfig,
    WeakBinPolicy,
)
from .review import ReviewConfig, ReviewError
from .inner_loop import LoopConfig

ENV_ENDPOINT = "DATAEVOLVER_REVIEWER_ENDPOINT"
ENV_PARALLELISM = "DATAEVOLVER_PARALLELISM"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ReviewerBackendConfig:
    backend: str = "scripted"  # "scripted" | "remote"
    endpoint: Optional[str] = None
    timeout_s: float = 10.0
    retries: int = 2
    parallelism: int = 4

    def __post_init__(self):
        if self.backend not in ("scripted", "remote"):
            raise ConfigError(f"reviewer backend must be scripted|remote, got {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("remote reviewer backend requires an endpoint")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


@dataclass(frozen=True)
class SimulatorConfig:
    objects: tuple[str, ...] = tuple(f"obj_{i:02d}" for i in range(1, 7))
    render_size: int = 64
    samples_per_round: int = 12
    defect_seed: int = 7
    masks_available: bool = True

    def __post_init__(self):
        if not self.objects:
            raise ConfigError("simulator needs at least one object")
        if self.samples_per_round < 1:
            raise ConfigError("samples_per_round must be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 0
    n_train_objects: int = 35
    n_val_objects: int = 7
    n_test_objects: int = 8
    target_views_per_object: int = 7


@dataclass(frozen=True)
class ExportConfig:
    instruction_template: str = (
        "Rotate the {object_name} from the front view to the {view_name} view.")
    prompt_version: str = "v1"


@dataclass(frozen=True)
class EngineConfig:
    workspace: Path
    simulator: SimulatorConfig
    reviewer: ReviewerBackendConfig
    loop: LoopConfig
    rounds: tuple[RoundConfig, ...]
    weak_policy: WeakBinPolicy
    splits: SplitConfig
    export: ExportConfig
    raw: dict  # the effective document, persisted per round

    def round_config(self, round_id: int) -> RoundConfig:
        if not self.rounds:
            raise ConfigError("no round configurations defined")
        return self.rounds[min(round_id, len(self.rounds) - 1)]


def default_config_document() -> dict:
    """The bundled demo document: four rounds walking the gate chain."""
    return {
        "simulator": {
            "objects": [f"obj_{i:02d}" for i in range(1, 7)],
            "render_size": 64,
            "samples_per_round": 12,
            "defect_seed": 7,
            "masks_available": True,
        },
        "reviewer": {
            "backend": "scripted",
            "endpoint": None,
            "timeout_s": 10.0,
            "retries": 2,
            "parallelism": 4,
        },
        "inner_loop": {
            "max_rounds": 5,
            "plateau_eps": 0.02,
            "plateau_k": 2,
            "flip_limit": 2,
        },
        "review": {
            "w_vlm": 0.70,
            "w_cv": 0.30,
            "cap_trigger": 3,
            "cap_value": 0.40,
            "tau_pass": 0.80,
            "tau_reject": 0.40,
            "disagreement_margin": 0.5,
        },
        "rounds": [
            {"feedback": False, "inner_gate": False, "dual_gate": False},
            {"feedback": True, "inner_gate": False, "dual_gate": False},
            {"feedback": True, "inner_gate": True, "dual_gate": False},
            {"feedback": True, "inner_gate": True, "dual_gate": True},
        ],
        "round_defaults": {
            "expansion_budget": 6,
            "inner_gate_threshold": 0.8,
            "guards": [
                {"metric": "psnr", "direction": "higher", "tolerance": 0.005},
                {"metric": "ssim", "direction": "higher", "tolerance": 0.005},
            ],
            "weak_policy": {"metric": "psnr", "direction": "higher",
                            "mode": "bottom_k", "k": 2},
        },
        "splits": {"seed": 0, "n_train_objects": 4, "n_val_objects": 1,
                   "n_test_objects": 1, "target_views_per_object": 7},
        "export": {
            "instruction_template": ("Rotate the {object_name} from the front "
                                     "view to the {view_name} view."),
            "prompt_version": "v1",
        },
    }


def _build_round_config(entry: dict, defaults: dict) -> RoundConfig:
    guards = tuple(
        GuardSpec(metric=g["metric"], direction=g["direction"],
                  tolerance=float(g.get("tolerance", 0.005)))
        for g in defaults.get("guards", []))
    return RoundConfig(
        feedback_enabled=bool(entry.get("feedback", False)),
        inner_gate=InnerGateConfig(
            enabled=bool(entry.get("inner_gate", False)),
            threshold=float(defaults.get("inner_gate_threshold", 0.8))),
        dual_gate=DualGateConfig(
            enabled=bool(entry.get("dual_gate", False)),
            reviewer=str(entry.get("dual_gate_reviewer", "scripted"))),
        expansion_budget=int(defaults.get("expansion_budget", 0)),
        guards=guards,
        allow_nonstandard_chain=bool(entry.get("allow_nonstandard_chain", False)),
    )


def load_config(path: str | Path, workspace: Optional[str | Path] = None) -> EngineConfig:
    """Parse and validate the configuration document; raises ConfigError
    before any side effect when anything is malformed."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, workspace=workspace or path.parent)


def parse_config(doc: dict, workspace: str | Path) -> EngineConfig:
    try:
        sim_doc = dict(doc.get("simulator", {}))
        sim = SimulatorConfig(
            objects=tuple(sim_doc.get("objects", SimulatorConfig().objects)),
            render_size=int(sim_doc.get("render_size", 64)),
            samples_per_round=int(sim_doc.get("samples_per_round", 12)),
            defect_seed=int(sim_doc.get("defect_seed", 7)),
            masks_available=bool(sim_doc.get("masks_available", True)),
        )

        rev_doc = dict(doc.get("reviewer", {}))
        endpoint = os.environ.get(ENV_ENDPOINT) or rev_doc.get("endpoint")
        parallelism = int(os.environ.get(ENV_PARALLELISM)
                          or rev_doc.get("parallelism", 4))
        reviewer = ReviewerBackendConfig(
            backend=str(rev_doc.get("backend", "scripted")),
            endpoint=endpoint,
            timeout_s=float(rev_doc.get("timeout_s", 10.0)),
            retries=int(rev_doc.get("retries", 2)),
            parallelism=parallelism,
        )

        review_doc = dict(doc.get("review", {}))
        review = ReviewConfig(
            w_vlm=float(review_doc.get("w_vlm", 0.70)),
            w_cv=float(review_doc.get("w_cv", 0.30)),
            cap_trigger=int(review_doc.get("cap_trigger", 3)),
            cap_value=float(review_doc.get("cap_value", 0.40)),
            tau_pass=float(review_doc.get("tau_pass", 0.80)),
            tau_reject=float(review_doc.get("tau_reject", 0.40)),
            disagreement_margin=float(review_doc.get("disagreement_margin", 0.5)),
        )

        loop_doc = dict(doc.get("inner_loop", {}))
        loop = LoopConfig(
            max_rounds=int(loop_doc.get("max_rounds", 5)),
            plateau_eps=float(loop_doc.get("plateau_eps", 0.02)),
            plateau_k=int(loop_doc.get("plateau_k", 2)),
            flip_limit=int(loop_doc.get("flip_limit", 2)),
            render_size=sim.render_size,
            masks_available=sim.masks_available,
            review=review,
        )

        defaults = dict(doc.get("round_defaults", {}))
        rounds = tuple(_build_round_config(dict(entry), defaults)
                       for entry in doc.get("rounds", [{}]))

        weak_doc = dict(defaults.get("weak_policy",
                                     {"metric": "psnr", "direction": "higher",
                                      "mode": "bottom_k", "k": 2}))
        weak_policy = WeakBinPolicy(
            metric=str(weak_doc.get("metric", "psnr")),
            direction=str(weak_doc.get("direction", "higher")),
            mode=str(weak_doc.get("mode", "bottom_k")),
            delta=float(weak_doc.get("delta", 0.0)),
            k=int(weak_doc.get("k", 2)),
        )

        split_doc = dict(doc.get("splits", {}))
        splits = SplitConfig(
            seed=int(split_doc.get("seed", 0)),
            n_train_objects=int(split_doc.get("n_train_objects", 35)),
            n_val_objects=int(split_doc.get("n_val_objects", 7)),
            n_test_objects=int(split_doc.get("n_test_objects", 8)),
            target_views_per_object=int(split_doc.get("target_views_per_object", 7)),
        )

        export_doc = dict(doc.get("export", {}))
        export = ExportConfig(
            instruction_template=str(export_doc.get(
                "instruction_template", ExportConfig().instruction_template)),
            prompt_version=str(export_doc.get("prompt_version", "v1")),
        )
    except (TypeError, ValueError, ReviewError, OuterLoopError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc

    effective = dict(doc)
    effective.setdefault("reviewer", {})
    effective["reviewer"] = {**rev_doc, "endpoint": endpoint, "parallelism": parallelism}

    return EngineConfig(
        workspace=Path(workspace),
        simulator=sim,
        reviewer=reviewer,
        loop=loop,
        rounds=rounds,
        weak_policy=weak_policy,
        splits=splits,
        export=export,
        raw=effective,
    )
