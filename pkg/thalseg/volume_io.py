"""Reading and writing volumes and label maps.

Two containers are supported, chosen by file suffix:
- `.nii` / `.nii.gz`: NIfTI-1 through nibabel. The affine is diag(spacing);
  space tag and side flag go in the header `descrip` field.
- `.raw`: little-endian block (float32 volumes, int16 labels) plus a text
  sidecar `<name>.raw.json` with dims, spacing, space, side and dtype.

Both round-trip bit-exactly.
"""
import json
import logging
import os
from typing import Union

import nibabel as nib
import numpy as np

from .errors import DataError
from .volumes import THALAMUS_SCHEMA, CaseBundle, CaseMeta, LabelMap, LabelSchema, Side, Space, Volume3D

logger = logging.getLogger(__name__)

RAW_VOLUME_DTYPE = "<f4"
RAW_LABEL_DTYPE = "<i2"


def _kind(path: str) -> str:
    if path.endswith(".nii") or path.endswith(".nii.gz"):
        return "nifti"
    if path.endswith(".raw"):
        return "raw"
    raise DataError(f"unsupported volume container for {path} (use .nii, .nii.gz or .raw)")


def _descrip(space: Space, side: Side, n_labels: int = 0) -> bytes:
    return f"space={space.value};side={side.value};labels={n_labels}".encode("ascii")


def _parse_descrip(raw: bytes) -> dict:
    text = raw.tobytes().decode("ascii", errors="ignore") if hasattr(raw, "tobytes") else str(raw)
    text = text.strip("\x00 ")
    fields = {}
    for part in text.split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            fields[k.strip()] = v.strip()
    return fields


def save_volume(path: str, v: Union[Volume3D, LabelMap]) -> str:
    is_labels = isinstance(v, LabelMap)
    n_labels = v.schema.n_labels if is_labels else 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if _kind(path) == "nifti":
        affine = np.diag(list(v.spacing) + [1.0])
        img = nib.Nifti1Image(v.data, affine)
        img.header.set_data_dtype(v.data.dtype)
        img.header.set_zooms(v.spacing)
        img.header["descrip"] = _descrip(v.space, v.side, n_labels)
        nib.save(img, path)
    else:
        dtype = RAW_LABEL_DTYPE if is_labels else RAW_VOLUME_DTYPE
        v.data.astype(dtype).tofile(path)
        header = {
            "dims": list(v.shape),
            "spacing": list(v.spacing),
            "space": v.space.value,
            "side": v.side.value,
            "dtype": dtype,
            "labels": n_labels,
            "provenance": dict(v.provenance),
        }
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
    logger.debug("wrote %s", path)
    return path


def _load(path: str):
    if not os.path.exists(path):
        raise DataError(f"missing volume file: {path}")
    if _kind(path) == "nifti":
        img = nib.load(path)
        data = np.asanyarray(img.dataobj)
        fields = _parse_descrip(img.header["descrip"])
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        return data, spacing, fields.get("space", "native"), fields.get("side", "n/a"), int(fields.get("labels", 0)), {}
    sidecar = path + ".json"
    if not os.path.exists(sidecar):
        raise DataError(f"raw volume {path} has no sidecar header {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    data = np.fromfile(path, dtype=header["dtype"]).reshape(header["dims"])
    return data, tuple(header["spacing"]), header["space"], header["side"], int(header.get("labels", 0)), header.get("provenance", {})


def load_volume(path: str) -> Volume3D:
    data, spacing, space, side, _, prov = _load(path)
    return Volume3D(data.astype(np.float32), spacing, Space(space), Side(side), prov)


def load_labels(path: str, schema: LabelSchema = None) -> LabelMap:
    data, spacing, space, side, n_labels, prov = _load(path)
    if schema is None:
        schema = THALAMUS_SCHEMA.subset(n_labels) if n_labels else THALAMUS_SCHEMA
    return LabelMap(data.astype(np.int16), schema, spacing, Space(space), Side(side), prov)


MANIFEST_NAME = "manifest.json"


def write_cases(cases, directory: str, extra: dict = None, fmt: str = ".nii.gz") -> str:
    """Write CaseBundles as `<dir>/<case_id>/<modality><fmt>` plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for case in cases:
        case_dir = os.path.join(directory, case.meta.case_id)
        files = {}
        for name, v in case.modalities.items():
            files[name] = os.path.relpath(save_volume(os.path.join(case_dir, name + fmt), v), directory)
        if case.labels is not None:
            files["labels"] = os.path.relpath(save_volume(os.path.join(case_dir, "labels" + fmt), case.labels), directory)
        entries.append({
            "case_id": case.meta.case_id,
            "side": case.meta.side.value,
            "age": case.meta.age,
            "sex": case.meta.sex,
            "source": case.meta.source,
            "pseudo_label": case.meta.pseudo_label,
            "seed": case.meta.seed,
            "files": files,
        })
    manifest = {"schema_version": 1, "cases": entries}
    manifest.update(extra or {})
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    logger.info("wrote %d cases to %s", len(entries), directory)
    return path


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_cases(directory: str, schema: LabelSchema = None):
    manifest = read_manifest(directory)
    cases = []
    for entry in manifest["cases"]:
        files = dict(entry["files"])
        label_file = files.pop("labels", None)
        mods = {name: load_volume(os.path.join(directory, rel)) for name, rel in files.items()}
        labels = load_labels(os.path.join(directory, label_file), schema) if label_file else None
        meta = CaseMeta(
            case_id=entry["case_id"],
            side=Side(entry.get("side", "n/a")),
            age=entry.get("age"),
            sex=entry.get("sex"),
            source=entry.get("source", "unknown"),
            pseudo_label=bool(entry.get("pseudo_label", False)),
            seed=entry.get("seed"),
        )
        cases.append(CaseBundle(mods, labels, meta))
    return cases
