"""Single-file zip checkpoints for every model kind.

Networks use the binary layout of :mod:`neuralnet`; matrices use its
matrix layout; everything else is JSON.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

from . import neuralnet as nn
from .dataset import NormalizationStats
from .koopman import DeepKoopmanModel, LinearLiftedModel
from .lifting import dictionary_from_dict
from .mlp_baseline import MlpDynModel


def _write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def save_checkpoint(path, model, stats: NormalizationStats, meta=None):
    meta = dict(meta or {})
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        if isinstance(model, DeepKoopmanModel):
            meta.update(kind="deep-edmd", random_layer=model.random_layer, random_sigma=model.random_sigma)
            _write(zf, "encoder.bin", nn.params_to_bytes(model.enc_specs, model.enc_params))
            _write(zf, "decoder.bin", nn.params_to_bytes(model.dec_specs, model.dec_params))
            _write(zf, "A.bin", nn.matrix_to_bytes(model.A))
            _write(zf, "B.bin", nn.matrix_to_bytes(model.B))
        elif isinstance(model, LinearLiftedModel):
            meta.setdefault("kind", "edmd")
            meta["residuals"] = model.residuals
            for name in "ABC":
                _write(zf, f"{name}.bin", nn.matrix_to_bytes(getattr(model, name)))
            _write(zf, "dictionary.json", json.dumps(model.dictionary.to_dict()))
        elif isinstance(model, MlpDynModel):
            meta.update(kind="mlp", random_layer=model.random_layer, random_sigma=model.random_sigma)
            _write(zf, "mlp.bin", nn.params_to_bytes(model.specs, model.params))
        else:
            raise TypeError(f"cannot checkpoint {type(model).__name__}")
        _write(zf, "stats.json", json.dumps(stats.to_dict()))
        _write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True))
    return Path(path)


def load_checkpoint(path):
    """Returns ``(model, stats, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        stats = NormalizationStats.from_dict(json.loads(zf.read("stats.json")))
        kind = meta["kind"]
        if kind == "deep-edmd":
            es, ep = nn.params_from_bytes(zf.read("encoder.bin"))
            ds, dp = nn.params_from_bytes(zf.read("decoder.bin"))
            model = DeepKoopmanModel(es, ep, ds, dp, nn.matrix_from_bytes(zf.read("A.bin")),
                                     nn.matrix_from_bytes(zf.read("B.bin")),
                                     meta["random_layer"], meta["random_sigma"])
        elif kind in ("edmd", "elm-edmd"):
            mats = {n: nn.matrix_from_bytes(zf.read(f"{n}.bin")) for n in "ABC"}
            model = LinearLiftedModel(mats["A"], mats["B"], mats["C"],
                                      dictionary_from_dict(json.loads(zf.read("dictionary.json"))),
                                      meta.get("residuals", {}))
        elif kind == "mlp":
            s, p = nn.params_from_bytes(zf.read("mlp.bin"))
            model = MlpDynModel(s, p, meta["random_layer"], meta["random_sigma"])
        else:
            raise ValueError(f"unknown checkpoint kind {kind!r}")
    return model, stats, meta
