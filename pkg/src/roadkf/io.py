"""File formats for networks, drives, labels, results and checkpoints.

Text formats are JSON Lines: a header object on line 1, then one record per
line.  Floats are written in shortest round-trip form (``repr``), which
reads back to the identical 64-bit value.  Checkpoints are binary and
little-endian.  Every writer replaces its target atomically (temp file in
the same directory, then rename), and every reader reports the offending
line or byte offset on malformed input.  Byte-level layouts are documented
in docs/formats.md.
"""

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, fields

import numpy as np

from roadkf.kalman import GnssEpoch
from roadkf.roadnet import SEGMENT_MAX_LEN, RawRoad, build_graph

VERSION = 1
NETWORK = "roadkf-network"
DRIVE = "roadkf-drive"
LABELS = "roadkf-labels"
RESULTS = "roadkf-results"
CHECKPOINT_MAGIC = b"RKFCKPT\x00"


class FormatError(ValueError):
    """Malformed or inconsistent file; the message names the file and location."""


# plumbing -----------------------------------------------------------------


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _write_lines(path, header, records):
    lines = [_dump(header)] + [_dump(r) for r in records]
    atomic_write(path, "\n".join(lines) + "\n")


def _read_lines(path, kind):
    """Yield ``(line_no, record)``; line 1 is checked as a ``kind`` header."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc.strerror}") from None
    if text and not text.endswith("\n"):
        raise FormatError(f"{path}:{text.count(chr(10)) + 1}: truncated line (no trailing newline)")
    out = []
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            raise FormatError(f"{path}:{no}: blank line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{no}: invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{no}: record must be an object")
        out.append((no, rec))
    if not out:
        raise FormatError(f"{path}:1: empty file")
    no, header = out[0]
    if header.get("format") != kind:
        raise FormatError(f"{path}:{no}: expected format {kind!r}, got {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise FormatError(f"{path}:{no}: unsupported version {header.get('version')!r} (expected {VERSION})")
    return path, header, out[1:]


def _field(path, no, rec, key, kind=None, optional=False):
    if key not in rec or rec[key] is None:
        if optional:
            return None
        raise FormatError(f"{path}:{no}: missing field {key!r}")
    v = rec[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise FormatError(f"{path}:{no}: field {key!r} must be a finite number")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise FormatError(f"{path}:{no}: field {key!r} must be an integer")
        return v
    if kind is bool and not isinstance(v, bool):
        raise FormatError(f"{path}:{no}: field {key!r} must be true or false")
    if kind is str and not isinstance(v, str):
        raise FormatError(f"{path}:{no}: field {key!r} must be a string")
    return v


def _array(path, no, rec, key, shape, optional=False):
    v = _field(path, no, rec, key, optional=optional)
    if v is None:
        return None
    try:
        a = np.array(v, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{path}:{no}: field {key!r} must be numeric") from None
    if a.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, a.shape)):
        raise FormatError(f"{path}:{no}: field {key!r} has shape {a.shape}, expected {shape}")
    return a


# networks -----------------------------------------------------------------


def write_network(path, roads, origin=(0.0, 0.0), max_len=SEGMENT_MAX_LEN):
    """Store primal roads as nodes (shared endpoints) and edges."""
    ids = {}
    nodes = []
    edges = []
    for road in roads:
        ends = []
        for p in (road.a, road.b):
            if p not in ids:
                ids[p] = len(ids)
                nodes.append({"type": "node", "id": ids[p], "east": p[0], "north": p[1]})
            ends.append(ids[p])
        edges.append(
            {
                "type": "edge",
                "nodes": ends,
                "lanes": road.lanes,
                "max_speed": road.max_speed,
                "road_type": road.road_type,
                "oneway": road.oneway,
                "direction": "forward" if road.oneway else "both",
            }
        )
    header = {
        "format": NETWORK,
        "version": VERSION,
        "origin": _floats(origin),
        "max_len": float(max_len),
        "nodes": len(nodes),
        "edges": len(edges),
    }
    _write_lines(path, header, nodes + edges)


def read_network(path):
    """Return ``(roads, header)``; roads are primal RawRoad records."""
    path, header, records = _read_lines(path, NETWORK)
    coords = {}
    roads = []
    for no, rec in records:
        kind = rec.get("type")
        if kind == "node":
            nid = _field(path, no, rec, "id", int)
            if nid in coords:
                raise FormatError(f"{path}:{no}: duplicate node id {nid}")
            coords[nid] = (_field(path, no, rec, "east", float), _field(path, no, rec, "north", float))
        elif kind == "edge":
            ends = _field(path, no, rec, "nodes")
            if not isinstance(ends, list) or len(ends) != 2:
                raise FormatError(f"{path}:{no}: edge needs exactly two node ids")
            for nid in ends:
                if nid not in coords:
                    raise FormatError(f"{path}:{no}: edge references unknown node {nid!r}")
            road_type = _field(path, no, rec, "road_type", str)
            direction = _field(path, no, rec, "direction", str)
            if direction not in ("forward", "both"):
                raise FormatError(f"{path}:{no}: direction must be 'forward' or 'both'")
            oneway = _field(path, no, rec, "oneway", bool, optional=True)
            if bool(oneway) != (direction == "forward"):
                raise FormatError(f"{path}:{no}: oneway and direction disagree")
            lanes = _field(path, no, rec, "lanes", int, optional=True)
            speed = _field(path, no, rec, "max_speed", float, optional=True)
            try:
                roads.append(RawRoad(coords[ends[0]], coords[ends[1]], lanes, speed, road_type, oneway))
            except ValueError as exc:
                raise FormatError(f"{path}:{no}: {exc}") from None
        else:
            raise FormatError(f"{path}:{no}: unknown record type {kind!r}")
    if not roads:
        raise FormatError(f"{path}: network has no edges")
    return roads, header


def load_graph(path):
    """Read a network file and build its split dual graph."""
    roads, header = read_network(path)
    return build_graph(roads, max_len=header.get("max_len", SEGMENT_MAX_LEN))


# drives -------------------------------------------------------------------


def write_drive(path, drive):
    cfg = asdict(drive.config)
    header = {
        "format": DRIVE,
        "version": VERSION,
        "seed": int(drive.seed),
        "network": drive.network,
        "epochs": len(drive),
        "config": cfg,
    }
    records = []
    err = drive.errors
    for t, ep in enumerate(drive.epochs):
        rec = {
            "epoch": t,
            "time": float(drive.times[t]),
            "truth": _floats(drive.truth[t]),
            "segment": int(drive.segment[t]),
            "sat_pos": [_floats(p) for p in ep.sat_pos],
            "pseudorange": _floats(ep.pseudorange),
            "pseudorange_rate": _floats(ep.pseudorange_rate),
            "range_sigma": _floats(ep.range_sigma),
            "rate_sigma": _floats(ep.rate_sigma),
        }
        if err is not None:
            rec["errors"] = {
                "noise": _floats(err.noise[t]),
                "multipath": _floats(err.multipath[t]),
                "rate_noise": _floats(err.rate_noise[t]),
                "visible": [bool(v) for v in err.visible[t]],
            }
        records.append(rec)
    _write_lines(path, header, records)


def read_drive(path, graph=None):
    """Read a DriveRecord; with ``graph`` segment ids are checked against it."""
    from roadkf import sim

    path, header, records = _read_lines(path, DRIVE)
    cfg_raw = _field(path, 1, header, "config")
    known = {f.name for f in fields(sim.ScenarioConfig)}
    unknown = sorted(set(cfg_raw) - known)
    if unknown:
        raise FormatError(f"{path}:1: unknown config keys {unknown}")
    try:
        cfg = sim.ScenarioConfig(**cfg_raw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}:1: invalid config: {exc}") from None
    n = _field(path, 1, header, "epochs", int)
    if len(records) != n:
        raise FormatError(f"{path}:{len(records) + 1}: truncated: header announces {n} epochs, found {len(records)}")
    times = np.zeros(n)
    truth = np.zeros((n, 8))
    segment = np.zeros(n, dtype=np.int64)
    epochs = []
    errs = {"noise": [], "multipath": [], "rate_noise": [], "visible": []}
    has_errors = True
    for t, (no, rec) in enumerate(records):
        if _field(path, no, rec, "epoch", int) != t:
            raise FormatError(f"{path}:{no}: expected epoch {t}")
        times[t] = _field(path, no, rec, "time", float)
        if t and not times[t] > times[t - 1]:
            raise FormatError(f"{path}:{no}: time does not increase")
        truth[t] = _array(path, no, rec, "truth", (8,))
        segment[t] = _field(path, no, rec, "segment", int)
        if graph is not None and not 0 <= segment[t] < graph.n:
            raise FormatError(f"{path}:{no}: segment {segment[t]} not in network of {graph.n} segments")
        sat = _array(path, no, rec, "sat_pos", (None, 3))
        k = sat.shape[0]
        cols = [_array(path, no, rec, key, (k,)) for key in ("pseudorange", "pseudorange_rate", "range_sigma", "rate_sigma")]
        epochs.append(GnssEpoch(times[t], sat, *cols))
        e = rec.get("errors")
        if e is None:
            has_errors = False
        elif has_errors:
            for key in ("noise", "multipath", "rate_noise"):
                errs[key].append(_array(path, no, e, key, (None,)))
            errs["visible"].append(np.array(_field(path, no, e, "visible"), dtype=bool))
    injected = None
    if has_errors and n:
        injected = sim.InjectedErrors(*(np.array(errs[k]) for k in ("noise", "multipath", "rate_noise")), np.array(errs["visible"]))
    seed = _field(path, 1, header, "seed", int)
    network = _field(path, 1, header, "network", str)
    return sim.DriveRecord(cfg, seed, network, times, truth, segment, epochs, injected)


# labels and results -------------------------------------------------------


def write_labels(path, labels, drive="drive", source="aided"):
    labels = np.asarray(labels, dtype=np.int64)
    header = {"format": LABELS, "version": VERSION, "drive": drive, "source": source, "epochs": int(labels.size)}
    _write_lines(path, header, [{"epoch": t, "segment": int(s)} for t, s in enumerate(labels)])


def read_labels(path, drive=None, graph=None):
    """Per-epoch oracle segment ids (-1 for none).

    ``drive`` (a DriveRecord) checks the epoch count, ``graph`` the ids.
    """
    path, header, records = _read_lines(path, LABELS)
    n = _field(path, 1, header, "epochs", int)
    if len(records) != n:
        raise FormatError(f"{path}:{len(records) + 1}: truncated: header announces {n} labels, found {len(records)}")
    if drive is not None and n != len(drive):
        raise FormatError(f"{path}:1: {n} labels for a drive of {len(drive)} epochs")
    out = np.zeros(n, dtype=np.int64)
    for t, (no, rec) in enumerate(records):
        if _field(path, no, rec, "epoch", int) != t:
            raise FormatError(f"{path}:{no}: expected epoch {t}")
        s = _field(path, no, rec, "segment", int)
        if s < -1 or (graph is not None and s >= graph.n):
            raise FormatError(f"{path}:{no}: invalid segment id {s}")
        out[t] = s
    return out


def write_results(path, results, drive="drive"):
    """``results`` maps method name to (means (T, >=2), errors (T,))."""
    records = []
    for method in results:
        means, errors = results[method]
        means = np.asarray(means, dtype=np.float64)
        for t, e in enumerate(np.asarray(errors, dtype=np.float64)):
            records.append(
                {"method": method, "epoch": t, "east": float(means[t, 0]), "north": float(means[t, 1]), "error_m": float(e)}
            )
    header = {"format": RESULTS, "version": VERSION, "drive": drive, "methods": list(results)}
    _write_lines(path, header, records)


def read_results(path):
    """Return ``{method: (positions (T, 2), errors (T,))}`` in file order."""
    path, header, records = _read_lines(path, RESULTS)
    methods = _field(path, 1, header, "methods")
    rows = {m: [] for m in methods}
    for no, rec in records:
        m = _field(path, no, rec, "method", str)
        if m not in rows:
            raise FormatError(f"{path}:{no}: method {m!r} not declared in the header")
        if _field(path, no, rec, "epoch", int) != len(rows[m]):
            raise FormatError(f"{path}:{no}: epochs of {m!r} out of order")
        rows[m].append((_field(path, no, rec, "east", float), _field(path, no, rec, "north", float), _field(path, no, rec, "error_m", float)))
    out = {}
    for m, r in rows.items():
        a = np.array(r, dtype=np.float64).reshape(-1, 3)
        out[m] = (a[:, :2], a[:, 2])
    return out


# checkpoints --------------------------------------------------------------
#
# magic (8 bytes) | u32 version | u64 header length | header JSON (utf-8)
# then per array: u16 name length | name | u8 ndim | u64 dims | f64 data
# All integers and floats little-endian.  Array names carry a section
# prefix: "param/", "adam.m/", "adam.v/", "bn.mean/", "bn.var/".


def _arrays(model, opt_state):
    out = [(f"param/{k}", model.params[k].value) for k in sorted(model.params)]
    for sec in ("m", "v"):
        moments = (opt_state or {}).get(sec, {})
        out += [(f"adam.{sec}/{k}", moments[k]) for k in sorted(moments)]
    for k in sorted(model.bn_stats):
        out.append((f"bn.mean/{k}", model.bn_stats[k]["mean"]))
        out.append((f"bn.var/{k}", model.bn_stats[k]["var"]))
    return out


def checkpoint_bytes(model, opt_state=None, meta=None):
    header = {
        "model": model.config_dict(),
        "adam_step": int((opt_state or {}).get("step", 0)),
        "meta": meta or {},
    }
    hb = _dump(header).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", VERSION, len(hb)), hb]
    for name, value in _arrays(model, opt_state):
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_checkpoint(path, model, opt_state=None, meta=None):
    atomic_write(path, checkpoint_bytes(model, opt_state, meta))


def load_checkpoint(path):
    """Return ``(model, opt_state, meta)``; bit-exact inverse of save_checkpoint."""
    from roadkf import autodiff as ad
    from roadkf.tgnn.model import TgnnConfig, TgnnModel

    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc.strerror}") from None
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}@{pos}: truncated while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}@0: not a roadkf checkpoint")
    version, hlen = struct.unpack("<IQ", take(12, "header size"))
    if version != VERSION:
        raise FormatError(f"{path}@8: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
        cfg = dict(header["model"])
        cfg["sigma_scale"] = tuple(cfg["sigma_scale"])
        model = TgnnModel(TgnnConfig(**cfg))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}@20: invalid header: {exc}") from None
    opt_state = {"step": header["adam_step"], "m": {}, "v": {}} if header["adam_step"] else {}
    seen = set()
    while pos < len(buf):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(take(8 * count, f"data of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        section, _, key = name.partition("/")
        if section == "param":
            if key not in model.params:
                raise FormatError(f"{path}@{start}: unknown parameter {key!r}")
            if model.params[key].value.shape != value.shape:
                raise FormatError(f"{path}@{start}: parameter {key!r} has shape {value.shape}, expected {model.params[key].value.shape}")
            model.params[key] = ad.parameter(value, name=key)
            seen.add(key)
        elif section in ("adam.m", "adam.v"):
            opt_state.setdefault(section[-1], {})[key] = value
        elif section in ("bn.mean", "bn.var"):
            if key not in model.bn_stats:
                raise FormatError(f"{path}@{start}: unknown batch-norm layer {key!r}")
            model.bn_stats[key][section[3:]] = value
        else:
            raise FormatError(f"{path}@{start}: unknown section {section!r}")
    missing = sorted(set(model.params) - seen)
    if missing:
        raise FormatError(f"{path}@{pos}: truncated: missing parameters {missing[:3]}")
    return model, opt_state, header["meta"]


__all__ = [
    "FormatError",
    "VERSION",
    "atomic_write",
    "checkpoint_bytes",
    "load_checkpoint",
    "load_graph",
    "read_drive",
    "read_labels",
    "read_network",
    "read_results",
    "save_checkpoint",
    "write_drive",
    "write_labels",
    "write_network",
    "write_results",
]
