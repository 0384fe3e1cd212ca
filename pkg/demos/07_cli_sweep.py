"""Drive the command-line tool: a margin sweep written to CSV/JSON files."""

import json
import os
import tempfile

from mmcl.cli import main

out = tempfile.mkdtemp(prefix="mmcl_sweep_")
main(["optimize", "--seed", "7", "--out", out, "--sweep", "margin=0.0001,0.01,0.1"])

with open(os.path.join(out, "sweep.json")) as fh:
    index = json.load(fh)
print()
for pt in index["points"]:
    print(pt["point"], "final homogeneity", pt["result"]["final_homogeneity"])
print("files under", out)
