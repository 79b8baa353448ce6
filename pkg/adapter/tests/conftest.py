"""Fixtures for the adapter's own test suite; no dependency on the
repair pipeline package."""

import shutil
import subprocess
from pathlib import Path

import pytest


@pytest.fixture(scope="session")
def hello_binary(tmp_path_factory) -> Path:
    cc = shutil.which("cc")
    if cc is None:
        pytest.skip("no C compiler on PATH")
    workdir = tmp_path_factory.mktemp("adapter-bin")
    src = workdir / "hello.c"
    src.write_text('#include <stdio.h>\nint main(void){ puts("hi"); return 0; }\n')
    exe = workdir / "hello"
    subprocess.run([cc, str(src), "-o", str(exe)], check=True, capture_output=True)
    return exe
