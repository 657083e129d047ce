"""JSON-lines dataset manifests: one ``{"id", "wav", "text"}`` object per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .dsp import read_wav
from .exceptions import InvalidInputError


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    wav: Path
    text: str

    def load_audio(self):
        return read_wav(self.wav)


def load_manifest(path, check_audio=True):
    """Parse ``path``; relative wav paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"manifest {path} does not exist")
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise InvalidInputError(f"{path}:{lineno}: expected a JSON object")
        missing = [k for k in ("id", "wav", "text") if not isinstance(row.get(k), str)]
        if missing:
            raise InvalidInputError(f"{path}:{lineno}: missing or non-string field(s) {', '.join(missing)}")
        if row["id"] in seen:
            raise InvalidInputError(f"{path}:{lineno}: duplicate id {row['id']!r}")
        seen.add(row["id"])
        wav = Path(row["wav"])
        if not wav.is_absolute():
            wav = path.parent / wav
        if check_audio:
            if not wav.is_file():
                raise InvalidInputError(f"{path}:{lineno}: wav file {wav} not found")
            read_wav(wav)
        entries.append(ManifestEntry(row["id"], wav, row["text"]))
    return entries
