"""Pydantic v2 schemas and LangGraph state definition for fcil-lab.

Experiment pipeline: prepare_stream → train_stream → score_metrics → write_artifacts → emit_report.
"""

from __future__ import annotations

import operator
from typing import Annotated, Any, Literal, TypedDict

from pydantic import BaseModel, Field, model_validator


Method = Literal["ecoral", "replay", "lwf", "ewc"]


# ---------------------------------------------------------------------------
# Configuration models
# ---------------------------------------------------------------------------


class BackboneSpec(BaseModel):
    """Architecture of a desk-scale classifier (also used for the condensation net)."""

    kind: str = Field(default="convnet", description="convnet or mlp")
    channels: int = Field(default=3, ge=1)
    image_size: int = Field(default=16, ge=1, description="Square input side length")
    width: int = Field(default=32, ge=1, description="Conv channels / hidden units per block")
    depth: int = Field(default=3, ge=1, description="Number of conv (or hidden) blocks")
    activation: Literal["relu", "tanh"] = "relu"


class EcoralComponents(BaseModel):
    """Cumulative ablation toggles of the condensation method."""

    adjustable_memory: bool = Field(default=True, description="A: rebalance quotas each task")
    gradient_matching: bool = Field(default=True, description="G: gradient matching loss")
    feature_matching: bool = Field(default=True, description="F: relationship matching loss")
    compensation: bool = Field(default=True, description="C: Shared-VAE + prototypes")
    contrastive: bool = Field(default=True, description="K: prototype contrastive term")

    @property
    def condenses(self) -> bool:
        return self.gradient_matching or self.feature_matching or (
            self.compensation and self.contrastive
        )

    def label(self) -> str:
        flags = [
            ("A", self.adjustable_memory),
            ("G", self.gradient_matching),
            ("F", self.feature_matching),
            ("C", self.compensation),
            ("K", self.contrastive),
        ]
        return "".join(name for name, on in flags if on) or "-"


class VaeConfig(BaseModel):
    """Shared-VAE hyperparameters."""

    latent_dim: int = Field(default=16, ge=1)
    hidden: int = Field(default=64, ge=1)
    beta_vae: float = Field(default=1.0, ge=0, description="KL weight (disentanglement pressure)")
    lr: float = Field(default=1e-3, gt=0)
    steps_per_round: int = Field(default=10, ge=0)
    samples_per_class: int = Field(default=16, ge=1, description="Generated features per class")
    aggregate_every: Literal["round", "task"] = "round"


class StrategyConfig(BaseModel):
    """Per-client training strategy derived from the experiment config."""

    method: Method = "ecoral"
    lr: float = Field(default=0.003, gt=0)
    lambda_kd: float = Field(default=3.0, ge=0, description="KD weight in the distillation loss")
    lambda_memory: float = Field(default=3.0, ge=0, description="Replay loss weight")
    kd_temperature: float = Field(default=2.0, gt=0)
    ewc_factor: float = Field(default=300.0, ge=0)
    beta: float = Field(default=0.5, ge=0)
    tau: float = Field(default=0.5, gt=0)
    eta: float = Field(default=0.01, gt=0, description="Condensation model learning rate")
    exemplar_lr: float = Field(default=0.01, ge=0)
    condense_iterations: int = Field(default=1, ge=1)
    E: int = Field(default=30, ge=1, description="Local epochs")
    batch_size: int = Field(default=32, ge=1, description="B_n")
    replay_batch_size: int = Field(default=32, ge=0, description="B_m")
    components: EcoralComponents = Field(default_factory=EcoralComponents)
    condense_memory: bool = Field(
        default=False, description="Let lwf/ewc keep a condensed memory as well"
    )
    include_old_group: bool = False

    @property
    def uses_kd(self) -> bool:
        return self.method in ("ecoral", "lwf")

    @property
    def uses_condensation(self) -> bool:
        if self.method == "ecoral":
            return self.components.condenses
        return self.condense_memory and self.method in ("lwf", "ewc")

    @property
    def uses_memory(self) -> bool:
        return self.method in ("ecoral", "replay") or self.condense_memory

    @property
    def uses_compensation(self) -> bool:
        c = self.components
        return self.uses_condensation and c.compensation and c.contrastive and self.beta > 0


class ExperimentConfig(BaseModel):
    """Flat experiment configuration. Defaults follow the reference implementation details."""

    dataset: str = Field(default="synthetic", description="'synthetic' or a raw-tensor directory path")
    synthetic_classes: int = Field(default=100, ge=1)
    samples_per_class: int = Field(default=100, ge=1, description="Synthetic train samples per class")
    test_per_class: int = Field(default=20, ge=1, description="Synthetic test samples per class")
    test_fraction: float = Field(default=0.2, gt=0, lt=1, description="Held-out share for on-disk data")
    T: int = Field(default=10, ge=1, description="Task count")
    classes_per_task: int = Field(default=10, ge=1)
    clients_initial: int = Field(default=20, ge=1)
    clients_increment: int = Field(default=5, ge=0)
    round_clients: int = Field(default=10, ge=0)
    transition_fraction: float = Field(default=0.9, ge=0, le=1)
    include_old_group: bool = False
    sigma: float = Field(default=0.5, gt=0, description="Dirichlet concentration")
    M: int = Field(default=100, ge=1, description="Per-client memory budget")
    R: int = Field(default=50, ge=1, description="Rounds per task")
    E: int = Field(default=30, ge=1, description="Local epochs per round")
    lr: float = Field(default=0.003, gt=0)
    lambda_kd: float = Field(default=3.0, ge=0)
    lambda_memory: float = Field(default=3.0, ge=0)
    kd_temperature: float = Field(default=2.0, gt=0)
    beta: float = Field(default=0.5, ge=0)
    tau: float = Field(default=0.5, gt=0)
    ewc_factor: float = Field(default=300.0, ge=0)
    eta: float = Field(default=0.01, gt=0)
    exemplar_lr: float = Field(default=0.01, ge=0)
    condense_iterations: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)
    replay_batch_size: int = Field(default=32, ge=0)
    method: Method = "ecoral"
    components: EcoralComponents = Field(default_factory=EcoralComponents)
    condense_memory: bool = False
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    baseline_inits: int = Field(default=3, ge=1, description="Fresh inits averaged for FwT baselines")
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs"
    parallel_seeds: bool = False

    @model_validator(mode="after")
    def _check_stream(self) -> "ExperimentConfig":
        if self.dataset == "synthetic" and self.T * self.classes_per_task > self.synthetic_classes:
            raise ValueError(
                f"T * classes_per_task = {self.T * self.classes_per_task} exceeds "
                f"synthetic_classes = {self.synthetic_classes}"
            )
        if not self.seeds:
            raise ValueError("seeds must contain at least one seed")
        return self

    @classmethod
    def desk(cls, **overrides: Any) -> "ExperimentConfig":
        """Desk-scale profile: synthetic 3-task stream, 4 clients, minutes on a laptop CPU."""
        base: dict[str, Any] = {
            "synthetic_classes": 6,
            "samples_per_class": 48,
            "test_per_class": 16,
            "T": 3,
            "classes_per_task": 2,
            "clients_initial": 4,
            "clients_increment": 0,
            "round_clients": 4,
            "M": 12,
            "R": 3,
            "E": 2,
            "lr": 0.05,
            "batch_size": 16,
            "replay_batch_size": 16,
            "exemplar_lr": 0.1,
            "backbone": BackboneSpec(width=16),
            "vae": VaeConfig(steps_per_round=5, samples_per_class=8),
        }
        base.update(overrides)
        return cls(**base)

    def strategy(self) -> StrategyConfig:
        return StrategyConfig(
            method=self.method,
            lr=self.lr,
            lambda_kd=self.lambda_kd,
            lambda_memory=self.lambda_memory,
            kd_temperature=self.kd_temperature,
            ewc_factor=self.ewc_factor,
            beta=self.beta,
            tau=self.tau,
            eta=self.eta,
            exemplar_lr=self.exemplar_lr,
            condense_iterations=self.condense_iterations,
            E=self.E,
            batch_size=self.batch_size,
            replay_batch_size=self.replay_batch_size,
            components=self.components,
            condense_memory=self.condense_memory,
            include_old_group=self.include_old_group,
        )


# ---------------------------------------------------------------------------
# Training reports
# ---------------------------------------------------------------------------


class CondenseReport(BaseModel):
    """Per-term losses of one condensation step."""

    step: int = 0
    l_cond: float = 0.0
    l_rel: float = 0.0
    l_mkcl: float = 0.0
    l_total: float = 0.0


class ElboReport(BaseModel):
    """Shared-VAE objective terms of one training step."""

    recon: float
    kl: float

    @property
    def total(self) -> float:
        return self.recon + self.kl


class ClientReport(BaseModel):
    """Summary of one client's local training in a round."""

    client_id: int
    sample_count: int = 0
    ce_loss: float = 0.0
    replay_loss: float = 0.0
    kd_loss: float = 0.0
    ewc_penalty: float = 0.0
    condense: list[CondenseReport] = Field(default_factory=list)
    omega_update_origins: dict[str, int] = Field(
        default_factory=dict, description="Origin tag → batches fed into the condensation net"
    )
    skipped: bool = False


class RoundReport(BaseModel):
    """One communication round of one task."""

    task: int
    round: int
    participants: list[int] = Field(default_factory=list)
    mean_ce_loss: float = 0.0
    mean_replay_loss: float = 0.0
    mean_kd_loss: float = 0.0
    classifier_norm: float = 0.0
    vae_norm: float | None = None
    omega_update_origins: dict[str, int] = Field(default_factory=dict)


class HeterogeneityReport(BaseModel):
    """Meta-information heterogeneity of per-client condensed memories."""

    pairwise_kl: dict[str, float] = Field(
        default_factory=dict, description="'a-b' → symmetric KL of class histograms"
    )
    delta_loss: float | None = Field(
        default=None, description="Global loss (actual partition) minus loss (IID reshuffle)"
    )


# ---------------------------------------------------------------------------
# Evaluation models
# ---------------------------------------------------------------------------


class AccuracyMatrix(BaseModel):
    """Lower-triangular accuracy matrix: rows[t][j] = accuracy on task j after task t."""

    rows: list[list[float]] = Field(default_factory=list)
    test_sizes: list[int] = Field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.test_sizes)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.T and all(
            len(row) == t + 1 for t, row in enumerate(self.rows)
        )


class MetricReport(BaseModel):
    """Continual-learning metric suite for one run."""

    A_avg: float
    A_last: float
    A_incre_avg: float
    A_incre_last: float
    Aa_avg: float
    Aa_last: float
    BwT: float | None = None
    FwT: float | None = None
    Remembering: float | None = Field(default=None, ge=0, le=1)
    Forgetting: float | None = Field(default=None, ge=0)


class RunArtifacts(BaseModel):
    """Paths of everything a seed run writes."""

    run_dir: str
    config_path: str
    matrix_path: str
    pretrain_path: str | None = None
    metrics_path: str
    loss_trace_paths: list[str] = Field(default_factory=list)
    round_reports_path: str | None = None
    partition_path: str | None = None
    heterogeneity_path: str | None = None
    checkpoint_path: str | None = None
    summary_path: str | None = None
    plot_paths: list[str] = Field(default_factory=list)


class ExperimentProgress(BaseModel):
    """Progress message emitted after every pipeline stage."""

    run_id: str
    stage: str = Field(description="prepare / train / metrics / artifacts / report / complete / error")
    message: str
    progress_pct: int = Field(ge=0, le=100)


# ---------------------------------------------------------------------------
# Pipeline state
# ---------------------------------------------------------------------------


class ExperimentState(TypedDict, total=False):
    """LangGraph state passed between pipeline stages for one seed.

    Tensor-bearing entries are typed as Any; list reducers let stages append
    to errors and progress_messages.
    """

    config: ExperimentConfig
    seed: int
    run_dir: str
    run_id: str
    started_at: str

    # ── Stream preparation ───────────────────────────────────────────
    train_set: Any  # DatasetSpec
    test_set: Any  # DatasetSpec
    schedule: Any  # TaskSchedule
    partitions: list[Any]  # ClientPartition per task
    groups: list[Any]  # ClientGroupAssignment per task
    partition_counts: list[dict]

    # ── Training ─────────────────────────────────────────────────────
    global_state: Any  # GlobalModelState
    clients: dict[int, Any]  # client-id → ClientState
    matrix: AccuracyMatrix | None
    pretrain_accuracy: list[float | None]
    random_baseline: list[float]
    round_reports: list[RoundReport]
    loss_traces: dict[int, list[CondenseReport]]
    heterogeneity: list[HeterogeneityReport]

    # ── Scoring and artifacts ────────────────────────────────────────
    metrics: MetricReport | None
    artifacts: RunArtifacts | None

    # ── Pipeline metadata ────────────────────────────────────────────
    current_stage: str
    errors: Annotated[list[str], operator.add]
    progress_messages: Annotated[list[str], operator.add]


def initial_state(
    config: ExperimentConfig, seed: int, run_dir: str, run_id: str = "", started_at: str = ""
) -> ExperimentState:
    """Create a fresh pipeline state for one seed."""
    return ExperimentState(
        config=config,
        seed=seed,
        run_dir=run_dir,
        run_id=run_id,
        started_at=started_at,
        train_set=None,
        test_set=None,
        schedule=None,
        partitions=[],
        groups=[],
        partition_counts=[],
        global_state=None,
        clients={},
        matrix=None,
        pretrain_accuracy=[],
        random_baseline=[],
        round_reports=[],
        loss_traces={},
        heterogeneity=[],
        metrics=None,
        artifacts=None,
        current_stage="initialized",
        errors=[],
        progress_messages=[],
    )
