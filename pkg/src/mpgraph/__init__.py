"""Message-passing inference compiler and engine for Forney-style factor graphs."""

from . import codegen, distributions, dsl, engine, graph, models, rules, scheduler
from .codegen import AlgorithmIR, Interpreter, compile_program, interpret, parse_listing, render
from .distributions import (
    Categorical,
    Dirichlet,
    Distribution,
    Gamma,
    GaussianCanonical,
    GaussianMeanPrecision,
    GaussianMeanVariance,
    PointMass,
    Wishart,
    average_energy,
    differential_entropy,
    moment,
    product,
    vague,
)
from .dsl import ModelParseError, parse_model
from .engine import (
    DirectExecutor,
    InferenceResult,
    NumericalError,
    init_marginals,
    iterate,
    predictive_score,
    run_inference,
    streaming_update,
)
from .graph import FactorGraph, GraphError, infer_supports
from .models import sample_generative
from .rules import Message, RuleRegistry, RuleUnavailable, default_registry
from .scheduler import (
    RecognitionFactorization,
    Schedule,
    SchedulingError,
    default_factorization,
    infer_types,
    render_schedule,
    render_schedules,
    schedule_free_energy,
    schedule_sum_product,
    schedule_vmp,
)

__version__ = "0.1.0"

__all__ = [
    "AlgorithmIR",
    "Categorical",
    "DirectExecutor",
    "Dirichlet",
    "Distribution",
    "FactorGraph",
    "Gamma",
    "GaussianCanonical",
    "GaussianMeanPrecision",
    "GaussianMeanVariance",
    "GraphError",
    "InferenceResult",
    "Interpreter",
    "Message",
    "ModelParseError",
    "NumericalError",
    "PointMass",
    "RecognitionFactorization",
    "RuleRegistry",
    "RuleUnavailable",
    "Schedule",
    "SchedulingError",
    "Wishart",
    "average_energy",
    "codegen",
    "compile_program",
    "default_factorization",
    "default_registry",
    "differential_entropy",
    "distributions",
    "dsl",
    "engine",
    "graph",
    "infer_supports",
    "infer_types",
    "init_marginals",
    "interpret",
    "iterate",
    "models",
    "moment",
    "parse_listing",
    "parse_model",
    "predictive_score",
    "product",
    "render",
    "render_schedule",
    "render_schedules",
    "rules",
    "run_inference",
    "sample_generative",
    "schedule_free_energy",
    "schedule_sum_product",
    "schedule_vmp",
    "scheduler",
    "streaming_update",
    "vague",
]
