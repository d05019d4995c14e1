from pydantic import Field, SecretStr
from pydantic_settings import BaseSettings, SettingsConfigDict


class AgevalSettings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="AGEVAL_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    name: str = Field(default="ageval", description="Name reported in fingerprints and report pages")
    version: str = Field(default="1.0.0", description="Engine version")

    # Judge
    judge_api_key: SecretStr | None = Field(default=None, description="Credential for remote judge endpoints")
    judge_tiers: str | None = Field(default=None, description="Judge tier config file (default: built-in tiers)")
    cache_dir: str | None = Field(default=None, description="Directory for the on-disk verdict cache")

    # Data packs
    metric_pack: str | None = Field(default=None, description="Metric pack overlaid on the built-in registry")
    taxonomy: str | None = Field(default=None, description="Taxonomy file (default: built-in)")
    thresholds: str | None = Field(default=None, description="Per-type threshold file")
    rules: str | None = Field(default=None, description="Rule set for the rule judge (default: built-in)")

    # Engine
    strategy: str = Field(default="greedy", description="Attribution strategy: greedy, fullpath or weighted")
    mode: str = Field(default="dag", description="Evaluation mode: dag, flat or e2e")
    combine: str = Field(default="min", description="Metric combination rule: min or mean")
    concurrency: int = Field(default=4, ge=1, description="Upper bound on in-flight judge calls")
    unroll_limit: int = Field(default=5, ge=1, description="Maximum retry attempts unrolled before flat fallback")
    counterfactual_delta: float = Field(default=1.0, ge=0.0, description="Mean improvement confirming a root cause")

    # Output
    run_store: str = Field(default=".ageval/runs", description="Regression run store directory")
    report_format: str = Field(default="json", description="Machine-readable report format (json or yaml)")
    log_level: str = Field(default="INFO", description="Console log level")


def get_settings() -> AgevalSettings:
    return AgevalSettings()
