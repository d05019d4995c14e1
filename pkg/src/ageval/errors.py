"""Exception hierarchy. Every error carries the component it originates from."""

from typing import ClassVar


class AgevalError(Exception):
    component: ClassVar[str] = "ageval"

    def __str__(self) -> str:
        return f"[{self.component}] {super().__str__()}"


# trace_model

class TraceError(AgevalError):
    component = "trace_model"


class TraceSyntaxError(TraceError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class TraceSchemaError(TraceError):
    pass


class DanglingParentError(TraceSchemaError):
    def __init__(self, step_id: str, parent_id: str):
        super().__init__(f"step {step_id!r} references unknown parent {parent_id!r}")
        self.step_id = step_id
        self.parent_id = parent_id


class TraceValidationError(TraceSchemaError):
    def __init__(self, trace_id: str, violations: list):
        rules = ", ".join(f"{v.step_id or '-'}: {v.rule}" for v in violations)
        super().__init__(f"trace {trace_id!r} violates invariants: {rules}")
        self.violations = violations


# dag_builder

class DagError(AgevalError):
    component = "dag_builder"


class CycleError(DagError):
    def __init__(self, witness: list[str]):
        super().__init__(f"cycle detected: {' -> '.join(witness)}")
        self.witness = witness


class AlignmentError(DagError):
    def __init__(self, node_id: str, patterns: list[str]):
        super().__init__(f"node {node_id!r} is claimed by several schema entries: {', '.join(patterns)}")
        self.node_id = node_id
        self.patterns = patterns


class UnknownNodeError(DagError):
    def __init__(self, node_id: str):
        super().__init__(f"unknown node id {node_id!r}")
        self.node_id = node_id


# rubrics

class RegistryError(AgevalError):
    component = "rubrics"


class UnregisteredStepTypeError(RegistryError):
    def __init__(self, step_type: str):
        super().__init__(f"step type {step_type!r} has no registered metric set")
        self.step_type = step_type


class MetricPackError(RegistryError):
    pass


# judge

class JudgeError(AgevalError):
    component = "judge"


class UnparseableVerdictError(JudgeError):
    pass


class ScoreOutOfRangeError(JudgeError):
    def __init__(self, score: int):
        super().__init__(f"score {score} outside 1..5")
        self.score = score


class JudgeUnavailableError(JudgeError):
    pass


# taxonomy

class TaxonomyError(AgevalError):
    component = "taxonomy"


class TaxonomyDepthError(TaxonomyError):
    def __init__(self, path: list[str]):
        super().__init__(f"path {'/'.join(path)} has depth {len(path)}, expected 3")
        self.path = path


class DuplicateTaxonomyIdError(TaxonomyError):
    pass


# engine / counterfactual

class EvaluationError(AgevalError):
    component = "engine"


class CounterfactualError(AgevalError):
    component = "counterfactual"


# statkit

class StatisticsError(AgevalError):
    component = "statkit"


class DegenerateMarginalsError(StatisticsError):
    pass


class RaggedGridError(StatisticsError):
    pass


class LengthMismatchError(StatisticsError):
    pass


# regression

class RegressionError(AgevalError):
    component = "regression"


class SuiteMismatchError(RegressionError):
    pass


class CaseResolutionError(RegressionError):
    def __init__(self, case_id: str, reason: str):
        super().__init__(f"case {case_id!r}: {reason}")
        self.case_id = case_id


# harness / report

class HarnessError(AgevalError):
    component = "harness"


class FormatVersionError(AgevalError):
    component = "cli_report"
