"""
Exporting attention maps
========================

Write a forward trace to disk with the command line tool, then render the
layer-patch map of one layer and the patch map as 3x3 grayscale images.
"""

import tempfile
from pathlib import Path

from ccra import io
from ccra.cli import main

out = Path(tempfile.mkdtemp(prefix="ccra_demo_"))
main(["forward", "--out", str(out)])

wlp = io.read_tensor(out / "wlp.ct")
print("layer-patch map", wlp.shape)

main(["heatmap", str(out / "wlp.ct"), "0", str(out / "layer0.pgm")])
main(["heatmap", str(out / "wp.ct"), "patch", str(out / "patches.pgm")])
main(["heatmap", str(out / "wp.ct"), "patch", str(out / "patches.csv"), "--format", "csv"])

print(io.decode_pgm((out / "layer0.pgm").read_bytes()))
print((out / "patches.csv").read_text())
print("files in", out, sorted(p.name for p in out.iterdir()))
