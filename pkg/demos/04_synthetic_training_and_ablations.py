# %% Train CETN and simMHN on a Frappe-shaped synthetic table, then run the ablation harness.
# The real benchmark splits are fetched with scripts/fetch_datasets.py; this demo
# needs nothing beyond the package.
import csv
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from cetn import cli, synthetic
from cetn.config import ExperimentConfig, apply_overrides
from cetn.data import DatasetSchema, SplitSpec, prepare_rows
from cetn.trainer import evaluate, train

n_rows = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
spec = synthetic.SyntheticSpec(n_rows=n_rows, seed=0)
header, rows = synthetic.generate(spec)
schema = DatasetSchema.from_dict(synthetic.schema_dict(spec))
data = prepare_rows(synthetic.as_dicts(header, rows), schema, SplitSpec((0.7, 0.2, 0.1), seed=2023))
print("rows", n_rows, "total features", data.total_features, "positive rate %.3f" % data.train.labels.mean())

small = [
    "model.embedding_dim=10", "model.value_dim=16", "model.hidden_dims=[64, 64]",
    "train.batch_size=1000", "train.max_epochs=8",
]

# %% CETN vs simMHN
for kind in ("cetn", "simmhn"):
    cfg = apply_overrides(ExperimentConfig(), small + [f"model.kind={kind!r}"]).validate()
    res = train(cfg, data)
    test = evaluate(res.model, data.test)
    print(f"{res.model.variant.label:8s} best epoch {res.log.best_epoch}  test auc {test.auc:.4f}  logloss {test.logloss:.4f}")

# %% ablation harness through the CLI, shared seed
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    data.save(tmp / "prepared")
    cfg_path = tmp / "cfg.json"
    cfg = apply_overrides(ExperimentConfig(), small + ["train.max_epochs=4"])
    cfg_path.write_text(cfg.dumps())
    cli.main(["ablate", "--config", str(cfg_path), "--data", str(tmp / "prepared"), "--out", str(tmp / "abl")])
    table = list(csv.DictReader((tmp / "abl" / "ablation.csv").open()))
    for r in table:
        print(f"{r['variant']:5s} test auc {float(r['test_auc']):.4f}  |cl| {float(r['max_abs_cl_term']):.3g}  |cos| {float(r['max_abs_cos_term']):.3g}")

    # %% representation dump of the full model: how far apart are the spaces?
    out = tmp / "repr.csv"
    cli.main(["repr-dump", "--checkpoint", str(tmp / "abl" / "full" / "model.ckpt"),
              "--data", str(tmp / "prepared"), "--n", "500", "--out", str(out)])
    vecs = {}
    for r in csv.DictReader(out.open()):
        vecs.setdefault(r["space"], []).append([float(r[k]) for k in r if k.startswith("v_")])
    unit = {k: (lambda m: m / np.linalg.norm(m, axis=1, keepdims=True))(np.array(v)) for k, v in vecs.items()}
    for s in ("ep", "ip"):
        print(f"mean cos(main, {s}) = {(unit['main'] * unit[s]).sum(axis=1).mean():.3f}")
    print(json.dumps({k: len(v) for k, v in vecs.items()}))
