# %% [markdown]
# # The command-line workflow
#
# Everything above is also available as a `motiondiff` command. Each command
# writes its outputs and a JSON manifest naming the flags, seed and input
# hashes. With the same seed, a rerun reproduces every file byte for byte.
#
# The calls below go through `main()` so the demo runs in-process. The shell
# equivalent is shown in each comment. Sizes are reduced for speed.

# %%
import json
import tempfile
from pathlib import Path

from motiondiff.cli import main

work = Path(tempfile.mkdtemp())


def sh(*argv):
    print("$ motiondiff", " ".join(map(str, argv)))
    code = main([str(a) for a in argv])
    assert code == 0, code


# %%
# motiondiff gen-data --out real.mdif --per-class 20 --seed 7
sh("gen-data", "--out", work / "real.mdif", "--per-class", 20, "--seed", 7)

# %%
# motiondiff train --data real.mdif --out model.mdck --epochs 4 --width 8 --seed 7
sh("train", "--data", work / "real.mdif", "--out", work / "model.mdck", "--epochs", 4, "--width", 8, "--seed", 7)

# %%
# motiondiff sample --checkpoint model.mdck --label all --count 10 --out samples.mdif --seed 7
sh("sample", "--checkpoint", work / "model.mdck", "--label", "all", "--count", 10,
   "--out", work / "samples.mdif", "--seed", 7)

# %%
# motiondiff eval --real real.mdif --generated samples.mdif --out report.csv --seed 7
sh("eval", "--real", work / "real.mdif", "--generated", work / "samples.mdif", "--out", work / "report.csv",
   "--seed", 7)

# %% [markdown]
# The sample manifest ties the file back to the exact checkpoint it came from.

# %%
manifest = json.loads((work / "samples.mdif.manifest.json").read_text())
print(json.dumps({k: manifest[k] for k in ("command", "seed", "lineage", "schedule")}, indent=2))

# %%
# motiondiff schedule-dump --T 5
sh("schedule-dump", "--T", 5)
print("\nartifacts in", work)
for p in sorted(work.iterdir()):
    print(f"  {p.name:<32} {p.stat().st_size:>8} bytes")
