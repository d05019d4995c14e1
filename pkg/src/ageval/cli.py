"""Command-line entry point: ``ageval evaluate | suite | simulate | taxonomy``."""

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ageval import harness, regression, report
from ageval.counterfactual import counterfactual_all, load_gold
from ageval.dag import apply_schema, infer_dag, load_schema, normalize
from ageval.engine import EvaluationContext, evaluate_trace
from ageval.errors import AgevalError
from ageval.judge import RemoteJudge, RuleJudge, VerdictCache, load_judge_tiers, load_rules
from ageval.models import AttributionStrategy, EvalMode
from ageval.rubrics import builtin_registry, load_metric_pack, load_thresholds
from ageval.settings import AgevalSettings, get_settings
from ageval.taxonomy import dump_taxonomy, load_taxonomy
from ageval.traces import load_trace_file

EXIT_OK = 0
EXIT_FAILURES = 2
EXIT_INFRA = 3


class CliConfig(BaseModel):
    """Per-invocation configuration: settings, then the --config file, then flags."""

    model_config = ConfigDict(frozen=True)

    judge: Literal["rule", "remote"] = "rule"
    judge_tiers: str | None = None
    metric_pack: str | None = None
    taxonomy: str | None = None
    thresholds: str | None = None
    rules: str | None = None
    cache_dir: str | None = None
    strategy: AttributionStrategy = AttributionStrategy.GREEDY_LOWEST_PARENT
    mode: EvalMode = EvalMode.DAG
    combine: Literal["min", "mean"] = "min"
    run_store: str = ".ageval/runs"
    concurrency: int = Field(default=4, ge=1)
    unroll_limit: int = Field(default=5, ge=1)
    counterfactual_delta: float = Field(default=1.0, ge=0.0)
    report_format: Literal["json", "yaml"] = "json"
    log_level: str = "INFO"

    @field_validator("judge_tiers", "metric_pack", "taxonomy", "thresholds", "rules")
    @classmethod
    def _exists(cls, value: str | None) -> str | None:
        if value is not None and not Path(value).is_file():
            raise ValueError(f"file not found: {value}")
        return value

    @classmethod
    def resolve(cls, settings: AgevalSettings, config_file: str | None = None, **flags) -> "CliConfig":
        values = settings.model_dump(include=set(cls.model_fields), exclude_none=True)
        if config_file is not None:
            try:
                data = yaml.safe_load(Path(config_file).read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as e:
                raise AgevalError(f"cannot read config {config_file}: {e}") from e
            values.update({k: v for k, v in data.items() if k in cls.model_fields})
        values.update({k: v for k, v in flags.items() if v is not None and k in cls.model_fields})
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise AgevalError(f"invalid configuration: {e}") from e

    def context(self, settings: AgevalSettings | None = None) -> EvaluationContext:
        if self.judge == "remote":
            judge = RemoteJudge(
                load_judge_tiers(self.judge_tiers),
                settings=settings,
                cache=VerdictCache(self.cache_dir),
            )
        else:
            judge = RuleJudge(load_rules(self.rules))
        registry = builtin_registry()
        if self.metric_pack:
            registry = load_metric_pack(self.metric_pack, base=registry)
        return EvaluationContext(
            judge=judge,
            registry=registry,
            taxonomy=load_taxonomy(self.taxonomy),
            thresholds=load_thresholds(self.thresholds),
            strategy=self.strategy,
            mode=self.mode,
            combine=self.combine,
            concurrency=self.concurrency,
        )


def _configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def _config(args: argparse.Namespace, settings: AgevalSettings) -> CliConfig:
    return CliConfig.resolve(
        settings,
        args.config,
        judge=getattr(args, "judge", None),
        mode=getattr(args, "mode", None),
        strategy=getattr(args, "strategy", None),
        rules=getattr(args, "rules", None),
        judge_tiers=getattr(args, "tiers", None),
        run_store=getattr(args, "store", None),
        report_format=getattr(args, "format", None),
        concurrency=getattr(args, "concurrency", None),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_evaluate(args: argparse.Namespace, settings: AgevalSettings) -> int:
    config = _config(args, settings)
    ctx = config.context(settings)
    trace = load_trace_file(args.trace, ctx.registry)
    dag = normalize(infer_dag(trace), config.unroll_limit)
    deviation = None
    if args.schema:
        dag, deviation = apply_schema(dag, load_schema(args.schema))
    result = evaluate_trace(dag, ctx, deviation)

    out = Path(args.out)
    path = report.write_report(result, out, config.report_format)
    if args.html:
        report.write_html(result, dag, out / f"{result.trace_id}.html")
    if args.gold:
        checks = counterfactual_all(dag, result, load_gold(args.gold), ctx, delta=config.counterfactual_delta)
        (out / f"{result.trace_id}.counterfactual.json").write_text(
            json.dumps([c.model_dump(mode="json") for c in checks], indent=2) + "\n", encoding="utf-8"
        )
    report.print_summary(result, path)
    return EXIT_FAILURES if result.flagged() else EXIT_OK


def cmd_suite(args: argparse.Namespace, settings: AgevalSettings) -> int:
    outcome_path = Path(args.outcome) if args.outcome else None
    try:
        config = _config(args, settings)
        spec = regression.load_suite(args.spec)
        store = regression.RunStore(config.run_store)
        base_dir = Path(args.spec).parent

        if args.action == "gate":
            result = regression.progressive_gate(spec, config.context(settings), store, base_dir)
        else:
            tier = regression.Tier(args.tier)
            if args.action == "run":
                record = regression.run_suite(spec, tier, config.context(settings), store, base_dir)
                detection = regression.check_run(store, spec.suite_id, tier, spec.policy, record.run_id)
            else:
                detection = regression.check_run(store, spec.suite_id, tier, spec.policy, args.run_id)
            result = regression.GateResult(
                suite_id=spec.suite_id,
                outcome=regression.outcome_for(detection.alert),
                **{tier.value: detection},
            )
    except (AgevalError, OSError) as e:
        logger.error("Suite command failed", extra={"component": "cmd_suite", "error": str(e)})
        result = regression.GateResult(
            suite_id="unknown", outcome=regression.GateOutcome.ERROR, error=str(e)
        )

    if outcome_path is not None:
        regression.write_outcome(result, outcome_path)
    print(f"Suite {result.suite_id}: {result.outcome.value}")
    for detection in (result.smoke, result.full):
        if detection is not None and detection.alert is not None:
            alert = detection.alert
            print(
                f"  {alert.severity.value} regression in {alert.scope}: drop {alert.drop:.3f} "
                f"(sigma {alert.sigma:.3f}, p {alert.p_value:.4f}); localized: {', '.join(alert.localized) or '-'}"
            )
        elif detection is not None:
            print(f"  {detection.reason}")
    return regression.ci_verdict(result.outcome)


def cmd_simulate(args: argparse.Namespace, settings: AgevalSettings) -> int:
    spec = harness.load_genspec(args.genspec) if args.genspec else harness.GenSpec()
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    out = Path(args.out)
    ctx = harness.oracle_context(concurrency=args.concurrency or 1)

    corpus = harness.generate(spec, args.n)
    harness.write_corpus(corpus, out)
    evaluation = harness.evaluate_corpus(corpus, ctx)
    table = harness.score_framework(evaluation.reports, [t for _, t in corpus], evaluation.dags, seed=spec.seed)
    (out / "table.md").write_text(table.to_markdown(), encoding="utf-8")
    report.write_document(table, out / "table.json")
    print(table.to_markdown(), end="")

    if args.sweep:
        rates = [float(r) for r in args.sweep.split(",")]
        seeds = range(spec.seed, spec.seed + args.sweep_seeds)
        points = harness.sweep_nondag(spec, rates, args.n, ctx, seeds)
        (out / "sweep.json").write_text(
            json.dumps([p.model_dump(mode="json") for p in points], indent=2) + "\n", encoding="utf-8"
        )
    if args.battery:
        summary = harness.regression_battery(ctx, cases=args.battery_cases)
        report.write_document(summary, out / "battery.json")
        print(f"Battery: detection {summary.detection_rate:.3f}, null alerts {summary.null_alert_rate:.3f}")
    return EXIT_OK


def cmd_taxonomy(args: argparse.Namespace, settings: AgevalSettings) -> int:
    if args.action == "dump":
        print(dump_taxonomy(load_taxonomy(args.file or settings.taxonomy)), end="")
        return EXIT_OK
    if not args.file:
        print("taxonomy validate needs a file", file=sys.stderr)
        return EXIT_INFRA
    try:
        taxonomy = load_taxonomy(args.file)
    except AgevalError as e:
        print(str(e), file=sys.stderr)
        return 1
    l1, l2, l3 = taxonomy.counts()
    print(f"{args.file}: valid ({l1} level-1, {l2} level-2, {l3} level-3)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ageval", description="DAG-based evaluation of agent execution traces")
    parser.add_argument("--config", help="YAML file overriding settings")
    parser.add_argument("--log-level", help="Console log level (default from AGEVAL_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def judge_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--judge", choices=["rule", "remote"], help="Judge backend")
        p.add_argument("--rules", help="Rule set for the rule judge")
        p.add_argument("--tiers", help="Judge tier config for the remote judge")
        p.add_argument("--mode", choices=[m.value for m in EvalMode])
        p.add_argument("--strategy", choices=[s.value for s in AttributionStrategy])
        p.add_argument("--concurrency", type=int)

    evaluate = sub.add_parser("evaluate", help="Evaluate one trace")
    evaluate.add_argument("trace")
    evaluate.add_argument("--schema", help="Workflow schema to align against")
    evaluate.add_argument("--gold", help="Gold outputs for counterfactual validation of root causes")
    evaluate.add_argument("--out", default="ageval-reports")
    evaluate.add_argument("--format", choices=list(report.REPORT_FORMATS))
    evaluate.add_argument("--html", action="store_true", help="Also write the static report page")
    judge_options(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    suite = sub.add_parser("suite", help="Regression suites")
    suite.add_argument("action", choices=["run", "check", "gate"])
    suite.add_argument("spec")
    suite.add_argument("--tier", choices=[t.value for t in regression.Tier], default="full")
    suite.add_argument("--store", help="Run store directory")
    suite.add_argument("--run-id", help="Stored run to check (default: latest)")
    suite.add_argument("--outcome", help="Write the machine-readable outcome file here")
    judge_options(suite)
    suite.set_defaults(handler=cmd_suite)

    simulate = sub.add_parser("simulate", help="Generate a synthetic corpus and score the framework on it")
    simulate.add_argument("genspec", nargs="?")
    simulate.add_argument("--out", default="ageval-sim")
    simulate.add_argument("-n", type=int, default=200)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--sweep", help="Comma-separated non-DAG rates")
    simulate.add_argument("--sweep-seeds", type=int, default=3)
    simulate.add_argument("--battery", action="store_true", help="Also run the regression battery")
    simulate.add_argument("--battery-cases", type=int, default=100)
    simulate.add_argument("--concurrency", type=int)
    simulate.set_defaults(handler=cmd_simulate)

    taxonomy = sub.add_parser("taxonomy", help="Inspect or validate a taxonomy")
    taxonomy.add_argument("action", choices=["dump", "validate"])
    taxonomy.add_argument("file", nargs="?")
    taxonomy.set_defaults(handler=cmd_taxonomy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    _configure_logging(args.log_level or settings.log_level)
    try:
        return args.handler(args, settings)
    except (AgevalError, OSError) as e:
        logger.error("Command failed", extra={"component": args.command, "error": str(e)})
        print(str(e), file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
