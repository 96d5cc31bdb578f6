"""JSON model files with provenance metadata."""
import hashlib
import json
from pathlib import Path

from .errors import ArtifactError, ParseError

TOOL_VERSION = "0.1.0"


def stable_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def vocab_hash(vocab):
    return stable_hash(list(vocab))


def save_artifact(path, kind, payload, *, seed, config):
    """Write ``payload`` with (format, config hash, seed, tool version) metadata."""
    doc = {
        "format": f"sar-{kind}/1",
        "tool_version": TOOL_VERSION,
        "seed": seed,
        "config_hash": stable_hash(config),
        "config": config,
        **payload,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_artifact(path, kind):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing {kind} artifact: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if doc.get("format") != f"sar-{kind}/1":
        raise ArtifactError(f"{path}: expected a sar-{kind}/1 file, found {doc.get('format')!r}")
    return doc


def check_vocab(doc, vocab, what):
    if doc.get("vocab_hash") != vocab_hash(vocab):
        raise ArtifactError(f"{what}: answer vocabulary hash mismatch with dataset")
