"""The experiment CLI, driven in-process.

`promptlab train|eval|segment|ablate` each read an INI config (or fall
back to the built-in reference preset), run deterministically, and write
config snapshot + CSVs + checkpoint into --out.  This demo writes a tiny
config so every subcommand finishes in a few seconds, then walks the
output directory.
"""

import pathlib
import tempfile

from promptlab.cli import main

TINY = """\
[model]
visual_width = 16
text_width = 16
shared_width = 8
depth = 2
heads = 2
patch_grid = 4
temperature = 0.1
visual_prompt_len = 2
text_prompt_len = 2

[train]
lr = 0.05
batch_size = 8
epochs = 10

[data]
n_classes = 4
per_class = 6
image_size = 16
data_seed = 3
shots = 4

[run]
seed = 0
ablate_axis = ensemble
"""

root = pathlib.Path(tempfile.mkdtemp(prefix="promptlab_demo_"))
cfg_path = root / "tiny.ini"
cfg_path.write_text(TINY)

for cmd in ("train", "segment", "ablate"):
    out = root / cmd
    print(f"\n$ promptlab {cmd} --config {cfg_path.name} --out {out.name}")
    code = main([cmd, "--config", str(cfg_path), "--out", str(out)])
    assert code == 0, f"{cmd} exited {code}"
    print("files:", ", ".join(sorted(p.name for p in out.iterdir())))

# Bad input exits 1 with a message on stderr, never a traceback.
print("\n$ promptlab train --strategy bogus")
code = main(["train", "--config", str(cfg_path), "--strategy", "bogus",
             "--out", str(root / "bad")])
print(f"exit code: {code}")
