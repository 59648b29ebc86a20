"""
Reproducible experiment runs
============================

The same entry points the ``splitedge`` command uses, driven from Python
with a trimmed config. Running twice with one seed writes identical CSVs.
"""
import tempfile
from pathlib import Path

from splitedge import config
from splitedge.experiments import cmd_gen_data, cmd_sweep_cut

text = """
[experiment]
seed = 3

[train]
clients = 2
rounds = 2

[data]
n_samples = 600

[sweep]
cuts = [4, 12]
"""
cfg = config.loads(text)

with tempfile.TemporaryDirectory() as tmp:
    outs = []
    for run in ("a", "b"):
        res = cmd_sweep_cut(cfg.with_out_dir(Path(tmp) / run))
        outs.append({k: Path(p).read_bytes() for k, p in res["files"].items()})
    print("files:", list(outs[0]))
    print("identical across runs:", outs[0] == outs[1])
    print(next(iter(outs[0].values())).decode())

    files = cmd_gen_data(cfg.with_out_dir(Path(tmp) / "data"))["files"]
    print("exported:", sorted(files))
