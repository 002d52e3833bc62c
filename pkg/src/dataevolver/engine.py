"""Round orchestration: requests, inner loops, gates, evaluation, verdicts.

A round turns the simulator catalog plus any carried-over expansion plan
into sample requests, drives one inner loop per request (bounded thread
pool), filters the accepted set through the configured gates, evaluates the
survivors per angle bin, plans the next expansion, and closes with a round
verdict guarded against metric regressions. Everything an auditor needs is
persisted: effective config, per-round logs, gate log, report, verdict.
"""

from __future__ import annotations

import json
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from . import scene as sim
from .config import EngineConfig
from .export_eval import (
    ExportSample,
    Manifest,
    SplitSpec,
    build_splits,
    engine_report,
    export_image_pairs,
    export_other,
    psnr,
    ssim,
)
from .inner_loop import InnerLoop, InnerLoopResult, LoopStatus
from .outer_loop import (
    EvalRecord,
    ExpansionPlan,
    ExpansionRequest,
    GateCandidate,
    MetricReport,
    RoundVerdict,
    apply_gates,
    escalate_gate_failures,
    evaluate_round,
    find_weak_subsets,
    plan_expansion,
    round_verdict,
)
from .review import RemoteReviewer, Reviewer, ScriptedReviewer
from .scene import DefectSpec, SceneState, inject_defects, true_quality
from .store import ArtifactId, ArtifactKind, ArtifactStore, RoundRecord

REQUEST_BINS = (45, 90, 135, 180, 225, 270, 315, 360)
POST_GATE_ORACLE_FLOOR = 0.97

_DEFECT_FAMILIES = ("none", "grounding", "penetration", "yaw", "scale",
                    "exposure", "blur")


@dataclass(frozen=True)
class SampleRequest:
    sample_id: str
    object_id: str
    angle_bin: int  # 0 = canonical front source; 45..360 evaluation bins
    defects: DefectSpec
    from_expansion: bool = False

    @property
    def target_yaw(self) -> float:
        return float(self.angle_bin % 360)


@dataclass
class RoundOutcome:
    round_id: int
    stage: str
    verdict: RoundVerdict
    report: dict
    report_ref: ArtifactId
    accepted_sample_ids: list[str]


def scripted_post_reviewer(candidate: GateCandidate) -> bool:
    """Independent post gate: re-check the final state against the oracle."""
    state = candidate.payload
    if not isinstance(state, SceneState):
        return False
    return true_quality(state).overall >= POST_GATE_ORACLE_FLOOR


class Engine:
    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.workspace = cfg.workspace
        self.store = ArtifactStore(self.workspace / "store")

    # -- reviewers -----------------------------------------------------

    def make_reviewer(self) -> Reviewer:
        rc = self.cfg.reviewer
        if rc.backend == "remote":
            return RemoteReviewer(endpoint=rc.endpoint, timeout=rc.timeout_s,
                                  retries=rc.retries, parallelism=rc.parallelism)
        return ScriptedReviewer()

    # -- request construction --------------------------------------------

    def _sample_defects(self, rng: random.Random) -> DefectSpec:
        family = rng.choice(_DEFECT_FAMILIES)
        if family == "grounding":
            return DefectSpec(grounding_gap=rng.uniform(0.01, 0.15))
        if family == "penetration":
            return DefectSpec(penetration=rng.uniform(0.01, 0.15))
        if family == "yaw":
            return DefectSpec(yaw_error=rng.choice((-1, 1)) * rng.uniform(2.0, 40.0))
        if family == "scale":
            return DefectSpec(scale_error=rng.choice((rng.uniform(0.6, 0.9),
                                                      rng.uniform(1.1, 1.6))))
        if family == "exposure":
            return DefectSpec(exposure_error=rng.choice((-1, 1)) * rng.uniform(0.03, 0.18))
        if family == "blur":
            return DefectSpec(blur=rng.uniform(0.5, 0.9))
        return DefectSpec()

    def build_requests(self, round_id: int,
                       plan: Optional[ExpansionPlan]) -> list[SampleRequest]:
        sim_cfg = self.cfg.simulator
        rng = random.Random(f"{sim_cfg.defect_seed}:{round_id}")
        requests: list[SampleRequest] = []
        seq = 0

        # every object keeps a canonical front source view current
        for object_id in sim_cfg.objects:
            requests.append(SampleRequest(
                sample_id=f"r{round_id}-{object_id}-a000-{seq:03d}",
                object_id=object_id, angle_bin=0,
                defects=self._sample_defects(rng)))
            seq += 1

        for i in range(sim_cfg.samples_per_round):
            object_id = sim_cfg.objects[i % len(sim_cfg.objects)]
            angle = REQUEST_BINS[i % len(REQUEST_BINS)]
            requests.append(SampleRequest(
                sample_id=f"r{round_id}-{object_id}-a{angle:03d}-{seq:03d}",
                object_id=object_id, angle_bin=angle,
                defects=self._sample_defects(rng)))
            seq += 1

        if plan is not None:
            for req in plan.requests:
                for _ in range(req.count):
                    requests.append(SampleRequest(
                        sample_id=(f"r{round_id}-{req.object_id}-a{req.angle_bin:03d}"
                                   f"-{seq:03d}"),
                        object_id=req.object_id, angle_bin=req.angle_bin,
                        defects=self._sample_defects(rng), from_expansion=True))
                    seq += 1
        return requests

    # -- round execution -----------------------------------------------------

    def _previous_plan(self, round_id: int) -> Optional[ExpansionPlan]:
        prev_ids = [r for r in self.store.round_ids() if r < round_id]
        if not prev_ids:
            return None
        prev = self.store.get_round(max(prev_ids))
        if prev.eval_report_ref is None:
            return None
        report = self.store.get_json(prev.eval_report_ref)
        rows = report.get("expansion_plan", {}).get("requests", [])
        if not rows:
            return None
        return ExpansionPlan(requests=tuple(
            ExpansionRequest(object_id=r["object_id"], angle_bin=int(r["angle_bin"]),
                             count=int(r.get("count", 1)))
            for r in rows))

    def _previous_metrics(self, round_id: int) -> Optional[MetricReport]:
        prev_ids = [r for r in self.store.round_ids() if r < round_id]
        if not prev_ids:
            return None
        prev = self.store.get_round(max(prev_ids))
        if prev.eval_report_ref is None:
            return None
        report = self.store.get_json(prev.eval_report_ref)
        values = report.get("metric_means", {})
        return MetricReport(values=dict(values)) if values else None

    def run_round(self, round_id: int) -> RoundOutcome:
        cfg = self.cfg
        round_cfg = cfg.round_config(round_id)
        config_ref = self.store.put_json(
            {"round_id": round_id, "effective_config": cfg.raw,
             "chain": {"feedback": round_cfg.feedback_enabled,
                       "inner_gate": round_cfg.inner_gate.enabled,
                       "dual_gate": round_cfg.dual_gate.enabled}},
            ArtifactKind.DIAGNOSTIC_LOG)

        plan_in = self._previous_plan(round_id) if round_cfg.feedback_enabled else None
        requests = self.build_requests(round_id, plan_in)
        reviewer = self.make_reviewer()
        loop = InnerLoop(self.store, reviewer, cfg.loop)

        def run_one(req: SampleRequest) -> tuple[SampleRequest, InnerLoopResult]:
            base = SceneState(object_id=req.object_id,
                              object_yaw_deg=req.target_yaw,
                              target_yaw_deg=req.target_yaw)
            state = inject_defects(base, req.defects,
                                   seed=hash((req.sample_id, cfg.simulator.defect_seed)))
            program = f"rotate({req.object_id}, yaw={req.angle_bin})"
            result = loop.run(state, req.sample_id, action_program_text=program,
                              round_id=round_id, angle_bin=req.angle_bin)
            return req, result

        with ThreadPoolExecutor(max_workers=cfg.reviewer.parallelism) as pool:
            results = list(pool.map(run_one, requests))

        accepted = [(req, res) for req, res in results
                    if res.status == LoopStatus.ACCEPTED]
        candidates = [GateCandidate(sample_id=res.sample_id, score=res.final_score,
                                    payload=res.final_state)
                      for _, res in accepted]
        post = scripted_post_reviewer if round_cfg.dual_gate.enabled else None
        gated, gate_log = apply_gates(candidates, round_cfg, post_reviewer=post)
        gated_ids = {c.sample_id for c in gated}

        # evaluate the gated set against clean references, per angle bin
        eval_records: list[EvalRecord] = []
        for req, res in accepted:
            if res.sample_id not in gated_ids or req.angle_bin == 0:
                continue
            reference = SceneState(object_id=req.object_id,
                                   object_yaw_deg=req.target_yaw,
                                   target_yaw_deg=req.target_yaw)
            got = sim.render(res.final_state, size=cfg.simulator.render_size)
            want = sim.render(reference, size=cfg.simulator.render_size)
            eval_records.append(EvalRecord(req.angle_bin, "psnr",
                                           psnr(got.rgb, want.rgb)))
            eval_records.append(EvalRecord(req.angle_bin, "ssim",
                                           ssim(got.rgb, want.rgb)))
            eval_records.append(EvalRecord(req.angle_bin, "oracle_overall",
                                           true_quality(res.final_state).overall))
        table = evaluate_round(eval_records)

        metric_means: dict[str, float] = {}
        by_metric: dict[str, list[float]] = {}
        for rec in eval_records:
            by_metric.setdefault(rec.metric, []).append(rec.value)
        for metric, values in by_metric.items():
            metric_means[metric] = sum(values) / len(values)
        current = MetricReport(values=metric_means) if metric_means else None

        weak: list[int] = []
        plan_out = ExpansionPlan(requests=())
        if round_cfg.feedback_enabled and metric_means:
            try:
                weak = find_weak_subsets(table, cfg.weak_policy)
            except Exception:
                weak = []
            plan_out = plan_expansion(weak, round_cfg.expansion_budget,
                                      cfg.simulator.objects)

        guard_report = round_verdict(current, self._previous_metrics(round_id),
                                     round_cfg.guards)
        verdict = guard_report.verdict
        escalation = escalate_gate_failures(gate_log)
        if escalation is not None:
            verdict = escalation

        verdict_values = [(v["sample_id"], v) for v in
                          (self._verdict_payload(res) for _, res in results)]
        log_rows = self._collect_log_rows([res for _, res in results])
        report_obj = engine_report(log_rows, [v for _, v in verdict_values],
                                   store=self.store,
                                   reliability_tau=cfg.loop.review.tau_pass)

        report = {
            "round_id": round_id,
            "stage": round_cfg.stage_name(),
            "chain": {"feedback": round_cfg.feedback_enabled,
                      "inner_gate": round_cfg.inner_gate.enabled,
                      "dual_gate": round_cfg.dual_gate.enabled},
            "requests": len(requests),
            "accepted": len(accepted),
            "gated_accepted": len(gated),
            "statuses": self._status_counts([res for _, res in results]),
            "per_angle": table.to_json(),
            "metric_means": metric_means,
            "weak_bins": weak,
            "expansion_plan": plan_out.to_json(),
            "verdict": verdict.value,
            "guard_outcomes": [
                {"metric": o.metric, "delta": o.delta, "improved": o.improved,
                 "regressed": o.regressed, "tolerance_abs": o.tolerance_abs}
                for o in guard_report.outcomes],
            "gate_log": [
                {"sample_id": e.sample_id, "inner_passed": e.inner_passed,
                 "post_passed": e.post_passed, "outcome": e.outcome}
                for e in gate_log],
            "engine_report": report_obj.to_json(),
            "sample_bins": {req.sample_id: req.angle_bin for req, _ in results},
        }
        report_ref = self.store.put_json(report, ArtifactKind.EXPORT_MANIFEST)
        self.store.record_round(RoundRecord(
            round_id=round_id,
            config_ref=config_ref,
            sample_ids=tuple(res.sample_id for _, res in results),
            eval_report_ref=report_ref,
            verdict=verdict.value,
        ))
        return RoundOutcome(round_id=round_id, stage=round_cfg.stage_name(),
                            verdict=verdict, report=report, report_ref=report_ref,
                            accepted_sample_ids=sorted(gated_ids))

    # -- replay --------------------------------------------------------------

    def replay(self, sample_id: str) -> dict:
        """Re-execute a logged inner loop from its recorded initial state and
        compare route sequence and final status against the original."""
        record = self.store.get_sample(sample_id)
        if record.verdict_ref is None:
            raise ValueError(f"sample {sample_id} has no verdict to replay against")
        verdict = self.store.get_json(record.verdict_ref)
        first_log = self._first_log(verdict)
        if first_log is None:
            raise ValueError(f"sample {sample_id} has no logged rounds")
        initial = SceneState.from_json(first_log["state"])
        with tempfile.TemporaryDirectory() as td:
            scratch = ArtifactStore(td)
            loop = InnerLoop(scratch, ScriptedReviewer(), self.cfg.loop)
            result = loop.run(initial, sample_id)
            replay_verdict = scratch.get_json(
                scratch.get_sample(sample_id).verdict_ref)
        match = (replay_verdict["routes"] == verdict["routes"]
                 and replay_verdict["status"] == verdict["status"])
        return {
            "sample_id": sample_id,
            "match": match,
            "original": {"routes": verdict["routes"], "status": verdict["status"]},
            "replayed": {"routes": replay_verdict["routes"],
                         "status": replay_verdict["status"]},
            "rounds_used": result.rounds_used,
        }

    # -- export ----------------------------------------------------------------

    def gather_export_samples(self) -> list[ExportSample]:
        """Latest gated-accepted render per (object, angle) across rounds."""
        views: dict[str, dict[int, str]] = {}
        sample_ids: dict[str, dict[int, str]] = {}
        for sid in sorted(self.store.sample_ids()):
            record = self.store.get_sample(sid)
            if record.verdict_ref is None or not record.render_refs:
                continue
            verdict = self.store.get_json(record.verdict_ref)
            if verdict.get("status") != "accepted":
                continue
            object_id = verdict.get("object_id")
            angle = verdict.get("angle_bin")
            if object_id is None or angle is None:
                continue
            views.setdefault(object_id, {})[int(angle)] = str(record.render_refs[-1])
            sample_ids.setdefault(object_id, {})[int(angle)] = sid
        return [
            ExportSample(object_id=obj, object_name=obj.replace("_", " "),
                         view_renders=angles,
                         prompt_version=self.cfg.export.prompt_version,
                         sample_ids=sample_ids[obj])
            for obj, angles in sorted(views.items())
        ]

    def export_pairs(self) -> dict[str, Manifest]:
        catalog = list(self.cfg.simulator.objects)
        spec = SplitSpec(seed=self.cfg.splits.seed,
                         n_train_objects=self.cfg.splits.n_train_objects,
                         n_val_objects=self.cfg.splits.n_val_objects,
                         n_test_objects=self.cfg.splits.n_test_objects,
                         target_views_per_object=self.cfg.splits.target_views_per_object)
        splits = build_splits(catalog, spec)
        manifests = export_image_pairs(
            self.gather_export_samples(), splits,
            instruction_template=self.cfg.export.instruction_template)
        out_dir = self.workspace / "exports"
        out_dir.mkdir(parents=True, exist_ok=True)
        for split_name, manifest in manifests.items():
            text = manifest.to_jsonl()
            (out_dir / f"image_pairs_{split_name}.jsonl").write_text(text, encoding="utf-8")
            self.store.put_artifact(text.encode("utf-8"), ArtifactKind.EXPORT_MANIFEST)
        return manifests

    def export_mode(self, mode: str) -> Manifest:
        if mode == "image_pairs":
            raise ValueError("use export_pairs for the image_pairs mode")
        samples: list[dict] = []
        for sid in sorted(self.store.sample_ids()):
            record = self.store.get_sample(sid)
            if record.verdict_ref is None:
                continue
            verdict = self.store.get_json(record.verdict_ref)
            geom = {ref.kind: str(ref) for ref in record.geom_refs}
            row = {
                "sample_id": sid,
                "verdict_ref": str(record.verdict_ref),
                "log_refs": list(verdict.get("log_refs", [])),
                "issue_tags": [],
                "rgb": str(record.render_refs[-1]) if record.render_refs else None,
                "mask": geom.get(ArtifactKind.MASK),
                "depth": geom.get(ArtifactKind.DEPTH_MAP),
                "normal": geom.get(ArtifactKind.NORMAL_MAP),
            }
            samples.append(row)
        manifest = export_other(mode, samples)
        out_dir = self.workspace / "exports"
        out_dir.mkdir(parents=True, exist_ok=True)
        text = manifest.to_jsonl()
        (out_dir / f"{mode}.jsonl").write_text(text, encoding="utf-8")
        self.store.put_artifact(text.encode("utf-8"), ArtifactKind.EXPORT_MANIFEST)
        return manifest

    # -- helpers -----------------------------------------------------------------

    def _verdict_payload(self, result: InnerLoopResult) -> dict:
        return {"sample_id": result.sample_id, "status": result.status.value,
                "rounds_used": result.rounds_used}

    def _collect_log_rows(self, results: list[InnerLoopResult]) -> list[dict]:
        rows: list[dict] = []
        for result in results:
            for ref in result.trace_refs:
                rows.append(json.loads(self.store.get_artifact(ref).decode("utf-8")))
        return rows

    def _status_counts(self, results: list[InnerLoopResult]) -> dict[str, int]:
        counts: dict[str, int] = {}
        for result in results:
            counts[result.status.value] = counts.get(result.status.value, 0) + 1
        return counts

    def _first_log(self, verdict: dict) -> Optional[dict]:
        refs = verdict.get("log_refs", [])
        if not refs:
            return None
        data = self.store.get_artifact(ArtifactId.parse(refs[0]))
        return json.loads(data.decode("utf-8"))
