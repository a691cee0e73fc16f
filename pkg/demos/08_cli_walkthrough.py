"""The command line end to end: data, training, inference, evaluation, replay."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ansg-cli-"))
work.mkdir(parents=True, exist_ok=True)
cfg = work / "config.json"
cfg.write_text(json.dumps({
    "data": {"extents": [6, 48, 48], "mask_every": 2},
    "rnn": {"preset": "desk"},
    "pipeline": {"tile": 48},
    "training": {"iterations": 50, "rnn_tile": 24, "rnn_init_range": 0.2},
}, indent=2))


def ansg(*args):
    cmd = [sys.executable, "-m", "ansg", *map(str, args)]
    print("$ ansg " + " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True, stderr=subprocess.DEVNULL)


ansg("shapes", "--config", cfg, "--out", work / "shapes")
ansg("gen-data", "--config", cfg, "--seed", 1, "--out", work / "data")
ansg("train", "--config", cfg, "--out", work / "fcn")
ansg("train", "--config", cfg, "--mode", "rnn_only", "--init-checkpoint", work / "fcn" / "checkpoint.ansg",
     "--out", work / "rnn")
ansg("infer", "--config", cfg, "--input", work / "data" / "stack.zstk",
     "--checkpoint", work / "rnn" / "checkpoint.ansg", "--out", work / "infer")
ansg("eval", "--config", cfg, "--pred", work / "infer" / "prob.zstk", "--out", work / "eval")

# every run leaves a manifest; replaying it reproduces the outputs bit for bit
ansg("train", "--config", work / "fcn" / "manifest.json", "--out", work / "fcn-replay")
same = (work / "fcn" / "checkpoint.ansg").read_bytes() == (work / "fcn-replay" / "checkpoint.ansg").read_bytes()
print("replayed checkpoint identical:", same)
print(f"outputs under {work}")
