"""Shared fixtures: compiled C programs and the seeded offline corpus."""

import json
import shutil
import subprocess
from pathlib import Path

import pytest

from redec.backends import BackendDescriptor, BackendKind
from redec.model import BinaryTarget
from redec.sandbox import ExecLimits
from redec.validators import generate_oracle

import corpus_seeds


def _require_cc():
    if shutil.which("cc") is None:
        pytest.skip("no C compiler on PATH", allow_module_level=True)


@pytest.fixture(scope="session")
def cc_path() -> str:
    path = shutil.which("cc")
    if path is None:
        pytest.skip("no C compiler on PATH")
    return path


@pytest.fixture(scope="session")
def compile_c(cc_path, tmp_path_factory):
    """Session-cached C compiler: compile_c(code, name) -> executable path."""
    root = tmp_path_factory.mktemp("compiled")
    built: dict[tuple, Path] = {}

    def _compile(code: str, name: str = "prog", flags: tuple = ()) -> Path:
        key = (code, name, flags)
        if key in built:
            return built[key]
        workdir = root / f"{name}-{len(built)}"
        workdir.mkdir()
        src = workdir / f"{name}.c"
        src.write_text(code)
        exe = workdir / name
        subprocess.run(
            [cc_path, str(src), "-o", str(exe), *flags],
            check=True,
            capture_output=True,
        )
        built[key] = exe
        return exe

    return _compile


@pytest.fixture(scope="session")
def seeded_corpus(compile_c, tmp_path_factory) -> Path:
    """Corpus-layout directory built from the seed programs.

    bin/ holds compiled reference binaries, src/ the broken decompiler
    stand-ins, tests/ oracles recorded from the real binaries, meta/
    opt-level and category tags.
    """
    corpus = tmp_path_factory.mktemp("corpus")
    for sub in ("bin", "src", "tests", "meta"):
        (corpus / sub).mkdir()
    limits = ExecLimits(wall_clock_s=5.0)
    for seed in corpus_seeds.SEEDS:
        exe = compile_c(seed.reference_c, seed.name)
        bin_path = corpus / "bin" / seed.name
        shutil.copy2(exe, bin_path)
        (corpus / "src" / f"{seed.name}.c").write_text(seed.broken_c)
        target = BinaryTarget.from_path(bin_path)
        suite = generate_oracle(target, list(seed.inputs), limits)
        suite.save(corpus / "tests" / f"{seed.name}.json")
        (corpus / "meta" / f"{seed.name}.json").write_text(
            json.dumps({"opt_level": "O0", "category": seed.category})
        )
    return corpus


@pytest.fixture()
def file_backend(seeded_corpus) -> BackendDescriptor:
    """Passthrough backend wired to the corpus' broken sources."""
    return BackendDescriptor(
        name="file",
        command_template=str(seeded_corpus / "src" / "{stem}.c"),
        timeout_s=10.0,
        kind=BackendKind.PASSTHROUGH,
    )


@pytest.fixture(scope="session")
def fast_limits() -> ExecLimits:
    return ExecLimits(wall_clock_s=5.0)
