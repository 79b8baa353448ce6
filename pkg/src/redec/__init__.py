"""redec: make decompiler output compile and re-execute again.

Pipeline: decompile a binary, then loop validate-and-repair under a strict
constraint ladder (syntax, compile+link, execution against an oracle
recorded from the original binary) until the candidate passes or the
iteration budget runs out.
"""

from .backends import BackendDescriptor, BackendKind, decompile, default_registry, normalize
from .model import (
    BinaryTarget,
    Diagnostics,
    Level,
    SourceUnit,
    TestCase,
    TestSuite,
    binary_id,
    output_equal,
)
from .orchestrator import Outcome, RefinementConfig, RefinementOutcome, refine, run_corpus
from .sandbox import ExecLimits, ExecutionRecord, Verdict, execute
from .validators import HarnessSpec, Toolchain, ValidationReport, generate_oracle, validate

__version__ = "0.1.0"

__all__ = [
    "BackendDescriptor",
    "BackendKind",
    "BinaryTarget",
    "Diagnostics",
    "ExecLimits",
    "ExecutionRecord",
    "HarnessSpec",
    "Level",
    "Outcome",
    "RefinementConfig",
    "RefinementOutcome",
    "SourceUnit",
    "TestCase",
    "TestSuite",
    "Toolchain",
    "ValidationReport",
    "Verdict",
    "binary_id",
    "decompile",
    "default_registry",
    "execute",
    "generate_oracle",
    "normalize",
    "output_equal",
    "refine",
    "run_corpus",
    "validate",
]
