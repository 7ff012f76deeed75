"""Post-execution test triage: log ingestion, staged LLM analysis,
duplicate-aware bug filing, and a recall/precision evaluation harness."""

__version__ = "0.1.0"

from .action import ActionKind, ActionRunner, Mailer, MailConfig, TrackerClient, TrackerConfig
from .config import AppConfig, load_config
from .errors import TriageError
from .evaluation import (
    EvaluationSample,
    MetricsReport,
    compute_precision,
    compute_recall,
    evaluate_samples,
    export_finetune_dataset,
    load_dataset,
)
from .ingestion import (
    ErrorDigest,
    ErrorPattern,
    ErrorRecord,
    TestFailure,
    TriageRequest,
    assemble_request,
    extract_errors,
    load_pattern_registry,
)
from .llm import (
    ChatMessage,
    CompletionResult,
    HttpChatBackend,
    MockBackend,
    MockRule,
    ModelProfile,
    REFERENCE_MOCK_RULES,
    Submodule,
    default_profiles,
)
from .pipeline import (
    BugSummary,
    DiagnosisVerdict,
    DuplicateCluster,
    RootCauseFinding,
    TriageOutcome,
    analyze_root_error,
    detect_duplicates,
    diagnose,
    run_pipeline,
    summarize,
)
from .registry import OpenReport, ReportRegistry, TicketRef
from .service import TriageApp, TriageResponse, TriageServer
from .templates import PromptTemplate, TemplateSet, load_templates, render

__all__ = [
    "__version__",
    "ActionKind", "ActionRunner", "Mailer", "MailConfig", "TrackerClient", "TrackerConfig",
    "AppConfig", "load_config",
    "TriageError",
    "EvaluationSample", "MetricsReport", "compute_precision", "compute_recall",
    "evaluate_samples", "export_finetune_dataset", "load_dataset",
    "ErrorDigest", "ErrorPattern", "ErrorRecord", "TestFailure", "TriageRequest",
    "assemble_request", "extract_errors", "load_pattern_registry",
    "ChatMessage", "CompletionResult", "HttpChatBackend", "MockBackend", "MockRule",
    "ModelProfile", "REFERENCE_MOCK_RULES", "Submodule", "default_profiles",
    "BugSummary", "DiagnosisVerdict", "DuplicateCluster", "RootCauseFinding",
    "TriageOutcome", "analyze_root_error", "detect_duplicates", "diagnose",
    "run_pipeline", "summarize",
    "OpenReport", "ReportRegistry", "TicketRef",
    "TriageApp", "TriageResponse", "TriageServer",
    "PromptTemplate", "TemplateSet", "load_templates", "render",
]
