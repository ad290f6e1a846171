"""Dataset manifests: TSV rows ``utt_id  path  label  attack_subtype``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

LABELS = ("bonafide", "spoof")
SUBTYPES = ("TTS", "VC")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    label: str
    subtype: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"{self.utt_id}: unknown label {self.label!r}")
        if self.label == "spoof" and self.subtype not in SUBTYPES:
            raise ManifestError(f"{self.utt_id}: spoof entry needs subtype TTS or VC")
        if self.label == "bonafide" and self.subtype is not None:
            raise ManifestError(f"{self.utt_id}: bonafide entry cannot carry a subtype")

    @property
    def target(self) -> int:
        """0 for bonafide, 1 for spoof."""
        return LABELS.index(self.label)


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; relative audio paths resolve against the manifest's folder.

    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(
                f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        utt, audio, label, subtype = fields
        if utt in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt!r}")
        seen.add(utt)
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        try:
            entries.append(ManifestEntry(utt, str(audio_path), label,
                                         None if subtype == "-" else subtype))
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return entries


def write_manifest(path, entries, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    lines = []
    for e in entries:
        audio = Path(e.path)
        try:
            audio = audio.relative_to(base)
        except ValueError:
            pass
        lines.append(f"{e.utt_id}\t{audio.as_posix()}\t{e.label}\t{e.subtype or '-'}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
