"""Regulator tooling: unannounced probe runs and suite-tuning detection.

Probes are drawn by seeded sampling from the registry class generators,
with every surface form already used by the default suite excluded, so an
organization tuned to the well-known suite still faces forms it has never
seen. Runs bypass session budgets entirely but land in the audit ledger
with a regulator marker.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from random import Random
from statistics import mean
from typing import Any, Optional, Sequence

from .canonical import canonical_json, quantize
from .divergence import (
    DivergenceConfig,
    QueryResult,
    assess_pattern,
    assess_single,
)
from .errors import AccessDeniedError, CounterprobeError, InsufficientProbesError
from .host import ModelRegistry, ScoreOutcome
from .perturbations import (
    ClassOrigin,
    PerturbationInstance,
    PerturbationRegistry,
    apply_instance,
)
from .records import Domain, FeatureRecord, parse_domain
from .service import Role, ServiceConfig, ServiceState


def _default_exclusions(
    registry: PerturbationRegistry, domain: Domain, template: FeatureRecord
) -> tuple[set[str], dict[tuple[str, str], set]]:
    """Digests and per-(class, field) values the default suite already uses."""
    suite = registry.default_suite(domain, template)
    digests = {inst.digest() for inst in suite.instances}
    values: dict[tuple[str, str], set] = {}
    for inst in suite.instances:
        values.setdefault((inst.class_id, inst.field), set()).add(inst.substituted_value)
    return digests, values


def generate_probes(
    registry: PerturbationRegistry,
    domain: Domain,
    seed: int,
    n_probes: int,
    *,
    template: Optional[FeatureRecord] = None,
) -> list[PerturbationInstance]:
    """Seeded non-standard probes, guaranteed disjoint from the default suite.

    Deterministic in (seed, registry, domain): pairs rotate round-robin in
    class-priority order and one shared RNG drives every draw.
    """
    template = template or registry.probe_template(domain)
    default_digests, default_values = _default_exclusions(registry, domain, template)
    rng = Random(seed)

    pairs = []
    for cls in registry.classes_by_priority(domain):
        if cls.origin is not ClassOrigin.REGULATOR_MINIMUM:
            continue
        for feature in cls.matched_features(template):
            pairs.append((cls, feature))
    if not pairs:
        raise InsufficientProbesError(f"no probe-capable classes for domain {domain.value}")

    probes: list[PerturbationInstance] = []
    used: dict[tuple[str, str], set] = {
        key: set(values) for key, values in default_values.items()
    }
    exhausted: set[int] = set()
    position = 0
    while len(probes) < n_probes:
        if len(exhausted) == len(pairs):
            raise InsufficientProbesError(
                f"generator pools exhausted after {len(probes)} of {n_probes} probes"
            )
        index = position % len(pairs)
        position += 1
        if index in exhausted:
            continue
        cls, feature = pairs[index]
        exclude = used.setdefault((cls.class_id, feature), set())
        substituted = cls.generator.sample(template.features[feature], rng, exclude)
        if substituted is None:
            exhausted.add(index)
            continue
        exclude.add(substituted)
        instance = PerturbationInstance(
            instance_id=f"probe-{len(probes):03d}.{cls.class_id}.{feature}",
            class_id=cls.class_id,
            field=feature,
            original_value=template.features[feature],
            substituted_value=substituted,
        )
        if instance.digest() in default_digests:
            continue  # exhaustive non-overlap guarantee
        probes.append(instance)
    return probes


def _probe_row(result: QueryResult) -> dict[str, Any]:
    # timestamps are omitted so reports are byte-identical across runs
    return {
        "probe_id": result.result_id,
        "instance": result.instance.to_json(),
        "score": result.perturbed.score,
        "percentile": result.perturbed.percentile,
        "label": result.perturbed.label.value,
        "score_delta": result.score_delta,
        "percentile_delta": result.percentile_delta,
    }


def _evaluate_probes(
    models: ModelRegistry,
    version_id: str,
    template: FeatureRecord,
    probes: Sequence[PerturbationInstance],
    baseline: ScoreOutcome,
    audit=None,
    marker: str = "regulator_audit",
) -> list[QueryResult]:
    results = []
    for probe in probes:
        outcome = models.evaluate(version_id, apply_instance(template, probe))
        result = QueryResult(instance=probe, baseline=baseline, perturbed=outcome)
        if audit is not None:
            audit.append(
                "query",
                {
                    "regulator_marker": marker,
                    "session_id": None,
                    "probe_id": probe.instance_id,
                    "instance_digest": probe.digest(),
                    "model_version": version_id,
                    "score_delta": result.score_delta,
                    "percentile_delta": result.percentile_delta,
                },
            )
        results.append(result)
    return results


def _config_for(models: ModelRegistry, version_id: str, overrides: dict) -> DivergenceConfig:
    version = models.get(version_id)
    return DivergenceConfig(
        decision_threshold=version.threshold_policy.decision_threshold,
        threshold_percentile=models.threshold_percentile(version_id),
        **overrides,
    )


def audit_run(
    models: ModelRegistry,
    registry: PerturbationRegistry,
    version_id: str,
    domain: Domain,
    seed: int,
    n_probes: int,
    *,
    audit=None,
    threshold_overrides: Optional[dict] = None,
) -> dict[str, Any]:
    """Run seeded non-standard probes and assess them like any session."""
    template = registry.probe_template(domain)
    cfg = _config_for(models, version_id, dict(threshold_overrides or {}))
    probes = generate_probes(registry, domain, seed, n_probes)
    baseline = models.evaluate(version_id, template)
    results = _evaluate_probes(models, version_id, template, probes, baseline, audit=audit)

    findings = []
    for result in results:
        findings.extend(
            assess_single(result.baseline, result.perturbed, cfg, result_id=result.result_id)
        )
    if results:
        findings.extend(assess_pattern(results, registry, cfg))

    default_digests, _ = _default_exclusions(registry, domain, template)
    return {
        "envelope": {
            "kind": "regulator_audit_run",
            "version_id": version_id,
            "domain": domain.value,
            "seed": seed,
            "probe_count": len(results),
            "non_overlap_ok": all(r.instance.digest() not in default_digests for r in results),
        },
        "baseline": {
            "score": baseline.score,
            "percentile": baseline.percentile,
            "label": baseline.label.value,
        },
        "findings": [f.to_json() for f in findings],
        "probes": [_probe_row(r) for r in sorted(results, key=lambda r: r.result_id)],
    }


def suite_tuning_probe(
    models: ModelRegistry,
    registry: PerturbationRegistry,
    version_id: str,
    domain: Domain,
    seed: int,
    *,
    audit=None,
    threshold_overrides: Optional[dict] = None,
) -> dict[str, Any]:
    """Two-arm comparison: default-suite probes vs seeded non-standard ones.

    Verdict is suite_tuned when the default arm's mean absolute percentile
    shift sits more than twice the configured noise floor below the
    non-standard arm's: behavior that dims exactly on the well-known suite.
    """
    template = registry.probe_template(domain)
    cfg = _config_for(models, version_id, dict(threshold_overrides or {}))
    baseline = models.evaluate(version_id, template)

    suite = registry.default_suite(domain, template)
    standard = list(suite.instances)
    nonstandard = generate_probes(registry, domain, seed, max(len(standard), 1))
    if len(standard) < cfg.pattern_min_count or len(nonstandard) < cfg.pattern_min_count:
        raise InsufficientProbesError(
            f"tuning comparison needs at least {cfg.pattern_min_count} probes per arm"
        )

    arm_a = _evaluate_probes(
        models, version_id, template, standard, baseline, audit=audit, marker="tuning_default"
    )
    arm_b = _evaluate_probes(
        models, version_id, template, nonstandard, baseline, audit=audit, marker="tuning_nonstandard"
    )
    mean_default = quantize(mean(abs(r.percentile_delta) for r in arm_a))
    mean_nonstandard = quantize(mean(abs(r.percentile_delta) for r in arm_b))
    margin = quantize(2.0 * cfg.noise_floor_percentile)
    tuned = mean_default < mean_nonstandard - margin
    return {
        "envelope": {
            "kind": "regulator_tuning_probe",
            "version_id": version_id,
            "domain": domain.value,
            "seed": seed,
        },
        "verdict": "suite_tuned" if tuned else "consistent",
        "default_mean_shift": mean_default,
        "nonstandard_mean_shift": mean_nonstandard,
        "margin": margin,
        "default_probes": [_probe_row(r) for r in arm_a],
        "nonstandard_probes": [_probe_row(r) for r in sorted(arm_b, key=lambda r: r.result_id)],
    }


# ---------------------------------------------------------------------------
# CLI entry point
# ---------------------------------------------------------------------------


def _build_state(args) -> ServiceState:
    config = ServiceConfig.load(args.config)
    state = ServiceState(config)
    credential = state.authenticate(args.key)
    if credential.role is not Role.REGULATOR:
        raise AccessDeniedError(
            f"credential {args.key!r} carries role {credential.role.value}; "
            "audit tooling requires the regulator role"
        )
    return state

def _write_report(report: dict[str, Any], out: Optional[str]) -> None:
    payload = canonical_json(report)
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="counterprobe-audit")
    parser.add_argument("--config", help="service YAML config (models, data dir, credentials)")
    parser.add_argument("--key", required=True, help="API credential; must carry the regulator role")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run seeded non-standard probes against a version")
    run_p.add_argument("--version", required=True)
    run_p.add_argument("--domain", required=True)
    run_p.add_argument("--seed", type=int, required=True)
    run_p.add_argument("--probes", type=int, required=True)
    run_p.add_argument("--out")

    tune_p = sub.add_parser("tuning", help="compare default-suite vs non-standard divergence")
    tune_p.add_argument("--version", required=True)
    tune_p.add_argument("--domain", required=True)
    tune_p.add_argument("--seed", type=int, required=True)
    tune_p.add_argument("--out")

    args = parser.parse_args(argv)
    try:
        state = _build_state(args)
        domain = parse_domain(args.domain)
        if args.command == "run":
            report = audit_run(
                state.models,
                state.perturbations,
                args.version,
                domain,
                args.seed,
                args.probes,
                audit=state.audit,
                threshold_overrides=state.config.thresholds,
            )
            _write_report(report, args.out)
            return 0
        report = suite_tuning_probe(
            state.models,
            state.perturbations,
            args.version,
            domain,
            args.seed,
            audit=state.audit,
            threshold_overrides=state.config.thresholds,
        )
        _write_report(report, args.out)
        print(f"verdict: {report['verdict']}", file=sys.stderr)
        return 2 if report["verdict"] == "suite_tuned" else 0
    except CounterprobeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
