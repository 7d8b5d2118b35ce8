"""Quantum application archives (``.qaa``).

An archive is a ZIP container with ``manifest.json`` at its root and the
application's files under ``workflows/``, ``programs/``, ``topology/`` and
``data/``. Packing is deterministic: entries are sorted, stored uncompressed
and carry a fixed timestamp, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Mapping

from .model.diagnostics import Diagnostic, ModelError
from .model.topology import TopologyModel, parse_topology, validate_topology
from .model.workflow import ActivityKind, BindingKind, WorkflowModel, parse_workflow

__all__ = [
    "ArchiveError",
    "ChecksumMismatch",
    "Manifest",
    "ArchiveLayout",
    "Application",
    "pack",
    "pack_dir",
    "unpack",
    "validate_archive",
    "write_manifest",
    "load_application",
    "digest",
]

MANIFEST = "manifest.json"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class ArchiveError(Exception):
    def __init__(self, message: str, diagnostics: list[Diagnostic] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or [Diagnostic("archive", message)]


class ChecksumMismatch(ArchiveError):
    pass


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Manifest:
    name: str
    version: str
    entry_workflow: str
    workflows: tuple[str, ...]
    topology: str
    programs: tuple[tuple[str, str], ...] = ()
    data: tuple[str, ...] = ()
    checksums: Mapping[str, str] = field(default_factory=dict, compare=False, hash=False)
    lifecycle: str | None = None

    @property
    def paths(self) -> list[str]:
        return [*self.workflows, self.topology, *(p for p, _ in self.programs), *self.data]

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Manifest":
        missing = [k for k in ("name", "version", "entry_workflow", "workflows", "topology") if k not in doc]
        if missing:
            raise ArchiveError(f"manifest lacks {', '.join(missing)}")
        programs = []
        for p in doc.get("programs", []):
            if isinstance(p, Mapping):
                programs.append((p["path"], p.get("kind", "classical")))
            else:
                programs.append((p, "classical"))
        return cls(
            name=str(doc["name"]),
            version=str(doc["version"]),
            entry_workflow=doc["entry_workflow"],
            workflows=tuple(doc["workflows"]),
            topology=doc["topology"],
            programs=tuple(programs),
            data=tuple(doc.get("data", [])),
            checksums=dict(doc.get("checksums", {})),
            lifecycle=doc.get("lifecycle"),
        )

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "version": self.version,
            "entry_workflow": self.entry_workflow,
            "workflows": list(self.workflows),
            "topology": self.topology,
            "programs": [{"path": p, "kind": k} for p, k in self.programs],
            "data": list(self.data),
            "checksums": dict(sorted(self.checksums.items())),
        }
        if self.lifecycle:
            doc["lifecycle"] = self.lifecycle
        return doc

    def encode(self) -> bytes:
        return (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode()


@dataclass(frozen=True)
class ArchiveLayout:
    root: Path
    manifest: Manifest

    def path(self, archive_path: str) -> Path:
        return self.root / archive_path

    @property
    def workflows_dir(self) -> Path:
        return self.root / "workflows"

    @property
    def programs_dir(self) -> Path:
        return self.root / "programs"


def _safe(path: str) -> str:
    p = PurePosixPath(path)
    if p.is_absolute() or ".." in p.parts or not p.parts:
        raise ArchiveError(f"illegal archive path {path!r}")
    return p.as_posix()


def write_manifest(source: str | Path) -> Manifest:
    """Recompute checksums for ``source`` and rewrite its manifest in canonical form."""
    root = Path(source)
    manifest = Manifest.from_dict(json.loads((root / MANIFEST).read_text()))
    sums = {}
    for p in manifest.paths:
        f = root / _safe(p)
        if not f.is_file():
            raise ArchiveError(f"missing referenced file {p}", [Diagnostic("missing_file", f"missing referenced file {p}", p)])
        sums[p] = digest(f.read_bytes())
    manifest = Manifest(**{**manifest.__dict__, "checksums": sums})
    (root / MANIFEST).write_bytes(manifest.encode())
    return manifest


def _read_source(source: Path) -> tuple[Manifest, dict[str, bytes]]:
    if not (source / MANIFEST).is_file():
        raise ArchiveError(f"{source} has no {MANIFEST}")
    manifest = Manifest.from_dict(json.loads((source / MANIFEST).read_text()))
    files = {}
    for p in manifest.paths:
        f = source / _safe(p)
        if not f.is_file():
            raise ArchiveError(f"missing referenced file {p}", [Diagnostic("missing_file", f"missing referenced file {p}", p)])
        files[p] = f.read_bytes()
    return manifest, files


def pack_dir(source: str | Path) -> bytes:
    """Pack the application rooted at ``source`` (which holds ``manifest.json``)."""
    manifest, files = _read_source(Path(source))
    wf_ids = {}
    for p in manifest.workflows:
        try:
            wf_ids[json.loads(files[p]).get("id")] = p
        except (json.JSONDecodeError, AttributeError):
            raise ArchiveError(f"workflow {p} is not a JSON document") from None
    if manifest.entry_workflow not in wf_ids:
        raise ArchiveError(
            f"entry workflow {manifest.entry_workflow} is not packaged",
            [Diagnostic("unresolved_entry", f"entry workflow {manifest.entry_workflow} is not packaged")],
        )
    manifest = Manifest(**{**manifest.__dict__, "checksums": {p: digest(b) for p, b in files.items()}})
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        entries = {MANIFEST: manifest.encode(), **files}
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.external_attr = 0o644 << 16
            info.create_system = 3
            zf.writestr(info, entries[name])
    return buf.getvalue()


pack = pack_dir


def _open(archive: bytes | str | Path) -> zipfile.ZipFile:
    data = archive if isinstance(archive, (bytes, bytearray)) else Path(archive).read_bytes()
    try:
        return zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise ArchiveError(f"truncated or unreadable archive: {exc}", [Diagnostic("truncated", str(exc))]) from None


def _read_entries(zf: zipfile.ZipFile) -> tuple[Manifest, dict[str, bytes | None], list[Diagnostic]]:
    diags: list[Diagnostic] = []
    try:
        manifest = Manifest.from_dict(json.loads(zf.read(MANIFEST)))
    except KeyError:
        raise ArchiveError("archive has no manifest.json") from None
    except (json.JSONDecodeError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise ArchiveError(f"unreadable manifest: {exc}") from None
    names = set(zf.namelist())
    contents: dict[str, bytes | None] = {}
    for p in manifest.paths:
        if p not in names:
            diags.append(Diagnostic("missing_file", f"manifest lists {p} but the archive lacks it", p))
            continue
        try:
            contents[p] = zf.read(p)
        except (zipfile.BadZipFile, OSError, EOFError):
            # the container's own CRC caught the damage
            contents[p] = None
    for p in manifest.paths:
        if p not in contents:
            continue
        data = contents[p]
        expected = manifest.checksums.get(p)
        if expected is None:
            diags.append(Diagnostic("missing_checksum", f"no checksum recorded for {p}", p))
        elif data is None or digest(data) != expected:
            diags.append(Diagnostic("checksum_mismatch", f"checksum mismatch for {p}", p))
    return manifest, contents, diags


@dataclass
class Application:
    """A parsed, cross-checked application loaded from an archive."""

    manifest: Manifest
    topology: TopologyModel
    workflows: dict[str, WorkflowModel]
    root: Path | None = None

    @property
    def entry(self) -> WorkflowModel:
        return self.workflows[self.manifest.entry_workflow]


def _declared_id(raw: bytes) -> str | None:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    return doc.get("id") if isinstance(doc, dict) else None


def _check_application(manifest: Manifest, contents: Mapping[str, bytes | None]) -> tuple[list[Diagnostic], Application | None]:
    diags: list[Diagnostic] = []
    topology = None
    raw = contents.get(manifest.topology)
    if raw is not None:
        try:
            topology = parse_topology(raw, check=False)
            diags.extend(validate_topology(topology))
        except ModelError as exc:
            diags.extend(exc.diagnostics)
    workflows: dict[str, WorkflowModel] = {}
    invalid: set[str] = set()  # ids of packaged workflows that failed to parse; already reported
    for p in manifest.workflows:
        raw = contents.get(p)
        if raw is None:
            continue
        try:
            wf = parse_workflow(raw)
        except ModelError as exc:
            diags.extend(Diagnostic(d.code, f"{p}: {d.message}", d.subject) for d in exc.diagnostics)
            invalid.add(_declared_id(raw))
            continue
        workflows[wf.id] = wf
    if manifest.entry_workflow not in workflows and manifest.entry_workflow not in invalid:
        diags.append(Diagnostic("unresolved_entry", f"entry workflow {manifest.entry_workflow} is not packaged"))
    packaged = set(manifest.paths)
    node_ids = set(topology.node_ids) if topology else set()
    for wf in workflows.values():
        for a in wf.activities:
            b = a.implementation
            if a.kind is ActivityKind.SUBWORKFLOW:
                if b.target not in workflows and b.target not in invalid:
                    diags.append(Diagnostic("unresolved_subworkflow", f"{wf.id}/{a.id}: sub-workflow {b.target} is not packaged", a.id))
            elif not b.topology_node:
                diags.append(Diagnostic("unbound_topology_node", f"unbound topology_node: {wf.id}/{a.id} names no topology node", a.id))
            elif b.topology_node not in node_ids:
                diags.append(
                    Diagnostic("unbound_topology_node", f"unbound topology_node {b.topology_node} in {wf.id}/{a.id}", a.id)
                )
            if b.kind in (BindingKind.IN_PROCESS, BindingKind.QPU_JOB):
                path = b.target.split(":", 1)[0]
                if path.startswith("programs/") and path not in packaged:
                    diags.append(Diagnostic("dangling_program", f"{wf.id}/{a.id}: program {path} is not packaged", a.id))
    if topology is None or diags:
        return diags, None
    return diags, Application(manifest, topology, workflows)


def validate_archive(archive: bytes | str | Path) -> list[Diagnostic]:
    """Every problem found in ``archive``; an empty list means it is deployable."""
    try:
        zf = _open(archive)
        with zf:
            manifest, contents, diags = _read_entries(zf)
    except ArchiveError as exc:
        return list(exc.diagnostics)
    damaged = {d.subject for d in diags}
    if damaged & ({manifest.topology} | set(manifest.workflows)):
        # cross references cannot be judged against a damaged model
        return diags
    ok = {p: b for p, b in contents.items() if b is not None and manifest.checksums.get(p) == digest(b)}
    more, _ = _check_application(manifest, ok)
    return diags + more


def unpack(archive: bytes | str | Path, destination: str | Path) -> ArchiveLayout:
    with _open(archive) as zf:
        manifest, contents, diags = _read_entries(zf)
        bad = [d for d in diags if d.code == "checksum_mismatch"]
        if bad:
            raise ChecksumMismatch(bad[0].message, bad)
        if diags:
            raise ArchiveError(diags[0].message, diags)
        root = Path(destination)
        root.mkdir(parents=True, exist_ok=True)
        (root / MANIFEST).write_bytes(zf.read(MANIFEST))
        for p, data in contents.items():
            target = root / _safe(p)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
    return ArchiveLayout(root, manifest)


def load_application(root: str | Path) -> Application:
    """Load an unpacked application directory and check its cross references."""
    root = Path(root)
    manifest, files = _read_source(root)
    diags, app = _check_application(manifest, files)
    if app is None:
        raise ArchiveError(diags[0].message if diags else "invalid application", diags)
    app.root = root
    return app
