"""Trainable scene model: both fields, the appearance table and the scalars."""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from .autodiff import MlpParams, Tensor
from .autodiff.checkpoint import read_checkpoint, write_checkpoint
from .fields import AppearanceTable, ColorField, FieldConfig, SdfField, average_embedding


class NeuralScene:
    def __init__(self, sdf: SdfField, color: ColorField, table: AppearanceTable,
                 log_s: Tensor, log_lam: Tensor, field_cfg: FieldConfig):
        self.sdf = sdf
        self.color = color
        self.table = table
        self.log_s = log_s
        self.log_lam = log_lam
        self.field_cfg = field_cfg

    @classmethod
    def create(cls, cfg: FieldConfig, image_ids: list[int], rng: np.random.Generator,
               s_init: float = 20.0, lam_init: float = 0.1) -> "NeuralScene":
        sdf = SdfField.create(cfg, rng)
        color = ColorField.create(cfg, rng)
        table = AppearanceTable.create(image_ids, cfg.embed_dim, rng)
        log_s = Tensor(np.array(math.log(s_init) / 10.0), requires_grad=True)
        log_lam = Tensor(np.array(math.log(max(lam_init, 1e-12))), requires_grad=True)
        return cls(sdf, color, table, log_s, log_lam, cfg)

    @property
    def s(self) -> float:
        return float(np.exp(10.0 * self.log_s.data))

    def lam_tensor(self, loss_cfg) -> Tensor | float:
        return self.log_lam.exp() if loss_cfg.lam_learnable else loss_cfg.lam

    def parameters(self, loss_cfg=None) -> list[Tensor]:
        params = self.sdf.parameters() + self.color.parameters() + [self.table.embeddings, self.log_s]
        if loss_cfg is not None and loss_cfg.lam_learnable:
            params.append(self.log_lam)
        return params

    def average_embedding(self) -> np.ndarray:
        return average_embedding(self.table)

    def embedding_for(self, image_id: int | None) -> np.ndarray:
        if image_id is None:
            return self.average_embedding()
        return self.table.embeddings.data[self.table.row_index(image_id)].copy()

    # -- persistence ---------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"sdf.{k}": v for k, v in self.sdf.params.arrays().items()}
        out.update({f"color.{k}": v for k, v in self.color.params.arrays().items()})
        out["appearance"] = self.table.embeddings.data
        out["log_s"] = self.log_s.data.reshape(1)
        out["log_lam"] = self.log_lam.data.reshape(1)
        return out

    def describe(self) -> dict:
        cfg = asdict(self.field_cfg)
        cfg["sdf_skip"] = list(cfg["sdf_skip"])
        return {
            "fields": cfg,
            "sdf": self.sdf.params.describe(),
            "color": self.color.params.describe(),
            "appearance_image_ids": list(self.table.image_ids),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], desc: dict) -> "NeuralScene":
        fc = dict(desc["fields"])
        fc["sdf_skip"] = tuple(fc["sdf_skip"])
        cfg = FieldConfig(**fc)
        sdf_p = MlpParams.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("sdf.")}, desc["sdf"])
        col_p = MlpParams.from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("color.")}, desc["color"])
        sdf = SdfField(sdf_p, cfg.pe_pos, cfg.feature_dim)
        color = ColorField(col_p, cfg.pe_dir, cfg.embed_dim, cfg.feature_dim)
        table = AppearanceTable(Tensor(arrays["appearance"].copy(), requires_grad=True),
                                list(desc["appearance_image_ids"]))
        log_s = Tensor(arrays["log_s"].reshape(()).copy(), requires_grad=True)
        log_lam = Tensor(arrays["log_lam"].reshape(()).copy(), requires_grad=True)
        return cls(sdf, color, table, log_s, log_lam, cfg)

    def save(self, path, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> None:
        arrays = self.arrays()
        arrays.update(extra_arrays or {})
        meta = {"model": self.describe()}
        meta.update(extra_meta or {})
        write_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> tuple["NeuralScene", dict[str, np.ndarray], dict]:
        arrays, meta = read_checkpoint(path)
        return cls.from_arrays(arrays, meta["model"]), arrays, meta
