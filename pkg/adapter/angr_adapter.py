#!/usr/bin/env python3
"""Bridge that decompiles a whole binary with angr and prints the C.

Invocation: <interpreter> angr_adapter.py <binary-path>

Contract with the caller:
  stdout  concatenated per-function C only, nothing else
  stderr  progress and diagnostics
  exit 0  success (stdout holds the recovered source)
  exit 10 the binary could not be loaded (also: missing path, angr absent)
  exit 11 decompilation produced nothing for any function
  exit 12 the binary contains no functions worth decompiling

PLT stubs and simprocedure placeholders are skipped; individual function
failures are logged and skipped, and only an empty overall result is an
error.
"""

import os
import sys

EXIT_OK = 0
EXIT_LOAD_FAILURE = 10
EXIT_DECOMPILE_FAILURE = 11
EXIT_NO_FUNCTIONS = 12


def note(msg):
    print(msg, file=sys.stderr)


def main(argv):
    if len(argv) != 2:
        note("usage: angr_adapter.py <binary-path>")
        return EXIT_LOAD_FAILURE
    path = argv[1]
    # validated before importing angr, so a bad path fails fast even on
    # hosts without the decompiler runtime
    if not os.path.isfile(path):
        note("load failure: no such file: %s" % path)
        return EXIT_LOAD_FAILURE

    try:
        import logging

        logging.getLogger("angr").setLevel(logging.CRITICAL)
        logging.getLogger("cle").setLevel(logging.CRITICAL)
        logging.getLogger("pyvex").setLevel(logging.CRITICAL)
        import angr
    except ImportError as exc:
        note("load failure: angr runtime not available: %s" % exc)
        return EXIT_LOAD_FAILURE

    try:
        proj = angr.Project(path, auto_load_libs=False, load_debug_info=False)
    except Exception as exc:
        note("load failure: %s" % exc)
        return EXIT_LOAD_FAILURE

    try:
        cfg = proj.analyses.CFGFast(normalize=True, data_references=True)
        try:
            proj.analyses.CompleteCallingConventions(
                cfg=cfg.model, recover_variables=True, analyze_callsites=True
            )
        except Exception as exc:
            note("calling-convention recovery failed, continuing: %s" % exc)
    except Exception as exc:
        note("decompile failure: CFG recovery failed: %s" % exc)
        return EXIT_DECOMPILE_FAILURE

    funcs = [
        f
        for f in cfg.functions.values()
        if not f.is_plt and not f.is_simprocedure and not f.is_syscall and f.size > 0
    ]
    if not funcs:
        note("no functions found in %s" % path)
        return EXIT_NO_FUNCTIONS

    pieces = []
    for func in funcs:
        try:
            dec = proj.analyses.Decompiler(func, cfg=cfg.model)
            text = dec.codegen.text if dec.codegen is not None else None
        except Exception as exc:
            note("skipping %s: %s" % (func.name, exc))
            continue
        if text and text.strip():
            pieces.append(text.strip("\n"))
            note("decompiled %s (%d chars)" % (func.name, len(text)))
        else:
            note("skipping %s: decompiler returned no text" % func.name)

    if not pieces:
        note("decompile failure: no function produced output")
        return EXIT_DECOMPILE_FAILURE
    sys.stdout.write("\n\n".join(pieces) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main(sys.argv))
