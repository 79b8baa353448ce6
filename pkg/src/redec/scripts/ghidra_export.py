# Ghidra headless postScript: decompile every non-thunk function and write
# the concatenated C to the path given as the script's first argument.
# Runs under Ghidra's Jython, not under this package's interpreter:
#   analyzeHeadless <proj_dir> <proj> -import <binary> -postScript ghidra_export.py <out.c>
#
# Kept deliberately close to stock Ghidra idiom so its output matches the
# checked-in golden samples used by the offline test corpus.

from ghidra.app.decompiler import DecompInterface
from ghidra.util.task import ConsoleTaskMonitor


def export(out_path):
    decomp = DecompInterface()
    decomp.openProgram(currentProgram)
    monitor = ConsoleTaskMonitor()
    pieces = []
    for func in currentProgram.getFunctionManager().getFunctions(True):
        if func.isThunk() or func.isExternal():
            continue
        result = decomp.decompileFunction(func, 60, monitor)
        if result is not None and result.decompileCompleted():
            pieces.append(result.getDecompiledFunction().getC())
        else:
            print("decompile failed for %s" % func.getName())
    decomp.dispose()
    fh = open(out_path, "w")
    try:
        fh.write("\n".join(pieces))
    finally:
        fh.close()


args = getScriptArgs()
if len(args) < 1:
    raise RuntimeError("usage: ghidra_export.py <output.c>")
export(args[0])
