"""Versioned checkpoints for models and policies.

One ``.npz`` container per object: a JSON header describing the kind,
format version, and scalar configuration, plus the arrays needed to
rebuild the object exactly (training data, parameters, standardization
constants).  Gram factorizations are recomputed on load rather than
stored; the rebuild path is deterministic, so round-trips are exact.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import InvalidInputError
from ..kernels import KernelFamily, StationaryParams
from ..policy import RbfPolicy
from .base import Standardizer
from .dgcn import DgcnModel, _build_model
from .gp import GpModel
from .pnn import EpnnModel, PnnModel

FORMAT = "mbps-checkpoint"
VERSION = 1


def _std_arrays(prefix: str, std: Standardizer) -> dict:
    return {f"{prefix}_mean": std.mean, f"{prefix}_scale": std.scale}


def _std_from(prefix: str, data) -> Standardizer:
    return Standardizer(mean=data[f"{prefix}_mean"], scale=data[f"{prefix}_scale"])


def save_model(obj, path) -> None:
    """Write a model or policy checkpoint to ``path`` (npz container)."""
    header: dict = {"format": FORMAT, "version": VERSION}
    arrays: dict = {}
    if isinstance(obj, GpModel):
        header["kind"] = "gp"
        header["family"] = obj.family.value
        arrays["inputs"] = obj.train_inputs
        arrays["targets"] = obj.train_targets
        arrays["lengthscales"] = np.stack([p.lengthscales for p in obj.params])
        arrays["signal_variance"] = np.array([p.signal_variance for p in obj.params])
        arrays["noise_variance"] = np.array([p.noise_variance for p in obj.params])
        arrays["rq_alpha"] = np.array([p.rq_alpha for p in obj.params])
        arrays.update(_std_arrays("x_std", obj.x_std))
        arrays.update(_std_arrays("y_std", obj.y_std))
    elif isinstance(obj, DgcnModel):
        header["kind"] = "dgcn"
        header["widths"] = list(obj.widths)
        header["rq_alpha"] = obj.rq_alpha
        arrays["inputs"] = obj.train_inputs
        arrays["targets"] = obj.train_targets
        for name, value in obj.weights.items():
            arrays[f"w_{name}"] = value
        arrays.update(_std_arrays("x_std", obj.x_std))
        arrays.update(_std_arrays("y_std", obj.y_std))
    elif isinstance(obj, EpnnModel):
        first = obj.members[0]
        header["kind"] = "epnn"
        header["widths"] = list(first.widths)
        header["weight_decay"] = first.weight_decay
        header["output_dim"] = first.output_dim
        header["n_members"] = len(obj.members)
        for i, member in enumerate(obj.members):
            for name, value in member.weights.items():
                arrays[f"m{i}_{name}"] = value
        arrays.update(_std_arrays("x_std", first.x_std))
        arrays.update(_std_arrays("y_std", first.y_std))
    elif isinstance(obj, RbfPolicy):
        header["kind"] = "policy"
        header["u_max"] = obj.u_max
        arrays["centers"] = obj.centers
        arrays["weights"] = obj.weights
        arrays["lengthscales"] = obj.lengthscales
    else:
        raise InvalidInputError(f"cannot checkpoint object of type {type(obj).__name__}")
    np.savez(path, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_model(path):
    """Rebuild the checkpointed object; inverse of :func:`save_model`."""
    with np.load(path) as data:
        if "header" not in data.files:
            raise InvalidInputError(f"{path} is not a recognized checkpoint")
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != FORMAT:
            raise InvalidInputError(f"{path} is not a recognized checkpoint")
        if header.get("version") != VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {header.get('version')!r}")
        kind = header["kind"]
        if kind == "gp":
            params = tuple(
                StationaryParams(
                    lengthscales=ls,
                    signal_variance=float(sv),
                    noise_variance=float(nv),
                    rq_alpha=float(rq),
                )
                for ls, sv, nv, rq in zip(
                    data["lengthscales"],
                    data["signal_variance"],
                    data["noise_variance"],
                    data["rq_alpha"],
                )
            )
            return GpModel.from_params(
                data["inputs"],
                data["targets"],
                params,
                family=KernelFamily(header["family"]),
                x_std=_std_from("x_std", data),
                y_std=_std_from("y_std", data),
            )
        if kind == "dgcn":
            weights = {
                name[len("w_"):]: data[name] for name in data.files if name.startswith("w_")
            }
            return _build_model(
                weights,
                tuple(header["widths"]),
                float(header["rq_alpha"]),
                data["inputs"],
                data["targets"],
                _std_from("x_std", data),
                _std_from("y_std", data),
            )
        if kind == "epnn":
            x_std = _std_from("x_std", data)
            y_std = _std_from("y_std", data)
            members = []
            for i in range(int(header["n_members"])):
                prefix = f"m{i}_"
                weights = {
                    name[len(prefix):]: data[name]
                    for name in data.files
                    if name.startswith(prefix)
                }
                members.append(
                    PnnModel(
                        weights=weights,
                        widths=tuple(header["widths"]),
                        weight_decay=float(header["weight_decay"]),
                        x_std=x_std,
                        y_std=y_std,
                        output_dim=int(header["output_dim"]),
                    )
                )
            return EpnnModel(members=members)
        if kind == "policy":
            return RbfPolicy(
                centers=data["centers"],
                weights=data["weights"],
                lengthscales=data["lengthscales"],
                u_max=float(header["u_max"]),
            )
        raise InvalidInputError(f"unknown checkpoint kind {kind!r}")
