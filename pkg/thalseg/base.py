"""Shared building blocks: strict pydantic base model and seed derivation."""
import hashlib

from pydantic import BaseModel, ConfigDict


class StrictModel(BaseModel):
    """Pydantic model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=False, protected_namespaces=())


def derive_seed(base: int, *keys) -> int:
    """Stable 63-bit seed from a base seed and any printable keys."""
    text = ":".join([str(int(base))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
