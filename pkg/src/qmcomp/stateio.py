"""Reading and writing states as structured JSON documents.

The on-disk layout (canonical extension ``.qstate.json``) lists registers as
(name, dim, kind) records and carries either a complex matrix with entries as
[re, im] pairs in row-major order, a complex amplitude vector, or a sparse
classical-quantum block map.  Serialization is lossless: floats go through
the shortest round-tripping decimal form, so load(save(x)) reproduces the
exact IEEE values.
"""

from __future__ import annotations

import json

import numpy as np

from .states import CLASSICAL, QUANTUM, CqState, DensityOperator, Register, StateVector

FORMAT_TAG = "qstate/1"


class StateFormatError(ValueError):
    """A state document is malformed: wrong fields, shapes, or tags."""


def _require_dict(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise StateFormatError(f"{where}: expected an object, got {type(obj).__name__}")
    return obj


def _take_fields(obj: dict, required: tuple, optional: tuple, where: str) -> None:
    missing = [k for k in required if k not in obj]
    if missing:
        raise StateFormatError(f"{where}: missing field(s) {', '.join(missing)}")
    unknown = [k for k in obj if k not in required and k not in optional]
    if unknown:
        raise StateFormatError(f"{where}: unknown field(s) {', '.join(sorted(unknown))}")


def _complex_from_json(entry, where: str) -> complex:
    if (
        not isinstance(entry, (list, tuple))
        or len(entry) != 2
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in entry)
    ):
        raise StateFormatError(f"{where}: complex entries must be [re, im] number pairs")
    return complex(float(entry[0]), float(entry[1]))


def _complex_to_json(z: complex) -> list:
    return [float(z.real), float(z.imag)]


def matrix_from_json(rows, where: str = "matrix") -> np.ndarray:
    if not isinstance(rows, list) or not rows:
        raise StateFormatError(f"{where}: expected a nonempty list of rows")
    width = None
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise StateFormatError(f"{where}: row {i} is not a list")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise StateFormatError(f"{where}: row {i} has {len(row)} entries, expected {width}")
        out.append([_complex_from_json(e, f"{where}[{i}]") for e in row])
    return np.array(out, dtype=complex)


def matrix_to_json(mat: np.ndarray) -> list:
    return [[_complex_to_json(complex(z)) for z in row] for row in np.asarray(mat)]


def vector_from_json(entries, where: str = "amplitudes") -> np.ndarray:
    if not isinstance(entries, list) or not entries:
        raise StateFormatError(f"{where}: expected a nonempty list of entries")
    return np.array([_complex_from_json(e, where) for e in entries], dtype=complex)


def vector_to_json(vec: np.ndarray) -> list:
    return [_complex_to_json(complex(z)) for z in np.asarray(vec)]


def _register_to_json(reg: Register) -> dict:
    return {"name": reg.name, "dim": reg.dim, "kind": reg.kind}


def _register_from_json(obj, where: str) -> Register:
    obj = _require_dict(obj, where)
    _take_fields(obj, ("name", "dim", "kind"), (), where)
    name, dim, kind = obj["name"], obj["dim"], obj["kind"]
    if not isinstance(name, str):
        raise StateFormatError(f"{where}: register name must be a string")
    if not isinstance(dim, int) or isinstance(dim, bool):
        raise StateFormatError(f"{where}: register dim must be an integer")
    if kind not in (CLASSICAL, QUANTUM):
        raise StateFormatError(f"{where}: register kind must be {CLASSICAL!r} or {QUANTUM!r}")
    return Register(name, dim, kind)


def _registers_from_json(items, where: str) -> tuple:
    if not isinstance(items, list) or not items:
        raise StateFormatError(f"{where}: expected a nonempty register list")
    return tuple(_register_from_json(r, f"{where}[{i}]") for i, r in enumerate(items))


def _block_to_json(block) -> dict:
    if isinstance(block, StateVector):
        return {"kind": "vector", "amplitudes": vector_to_json(block.amplitudes)}
    return {"kind": "density", "matrix": matrix_to_json(block.matrix)}


def _block_from_json(obj, registers: tuple, where: str):
    obj = _require_dict(obj, where)
    kind = obj.get("kind")
    if kind == "vector":
        _take_fields(obj, ("kind", "amplitudes"), (), where)
        return StateVector(vector_from_json(obj["amplitudes"], where), registers)
    if kind == "density":
        _take_fields(obj, ("kind", "matrix"), (), where)
        return DensityOperator(matrix_from_json(obj["matrix"], where), registers)
    raise StateFormatError(f"{where}: block kind must be 'vector' or 'density'")


def state_to_json(state) -> dict:
    """Serialize a StateVector, DensityOperator, or CqState to a JSON object."""
    if isinstance(state, StateVector):
        return {
            "format": FORMAT_TAG,
            "kind": "vector",
            "registers": [_register_to_json(r) for r in state.registers],
            "amplitudes": vector_to_json(state.amplitudes),
        }
    if isinstance(state, DensityOperator):
        return {
            "format": FORMAT_TAG,
            "kind": "density",
            "registers": [_register_to_json(r) for r in state.registers],
            "matrix": matrix_to_json(state.matrix),
        }
    if isinstance(state, CqState):
        return {
            "format": FORMAT_TAG,
            "kind": "cq",
            "classicalRegisters": [_register_to_json(r) for r in state.classical_registers],
            "quantumRegisters": [_register_to_json(r) for r in state.quantum_registers],
            "blocks": [
                {"key": list(key), "weight": float(w), "block": _block_to_json(b)}
                for key, (w, b) in state.blocks.items()
            ],
        }
    raise StateFormatError(f"cannot serialize a {type(state).__name__}")


def state_from_json(obj):
    """Rebuild a state from its JSON object form, validating every field."""
    obj = _require_dict(obj, "state")
    tag = obj.get("format")
    if tag != FORMAT_TAG:
        raise StateFormatError(f"state: unsupported format tag {tag!r}, expected {FORMAT_TAG!r}")
    kind = obj.get("kind")
    if kind == "vector":
        _take_fields(obj, ("format", "kind", "registers", "amplitudes"), (), "state")
        regs = _registers_from_json(obj["registers"], "registers")
        return StateVector(vector_from_json(obj["amplitudes"]), regs)
    if kind == "density":
        _take_fields(obj, ("format", "kind", "registers", "matrix"), (), "state")
        regs = _registers_from_json(obj["registers"], "registers")
        return DensityOperator(matrix_from_json(obj["matrix"]), regs)
    if kind == "cq":
        _take_fields(
            obj,
            ("format", "kind", "classicalRegisters", "quantumRegisters", "blocks"),
            (),
            "state",
        )
        cregs = _registers_from_json(obj["classicalRegisters"], "classicalRegisters")
        qregs = _registers_from_json(obj["quantumRegisters"], "quantumRegisters")
        if not isinstance(obj["blocks"], list) or not obj["blocks"]:
            raise StateFormatError("blocks: expected a nonempty list")
        blocks = {}
        for i, entry in enumerate(obj["blocks"]):
            where = f"blocks[{i}]"
            entry = _require_dict(entry, where)
            _take_fields(entry, ("key", "weight", "block"), (), where)
            key = entry["key"]
            if not isinstance(key, list) or not all(
                isinstance(x, int) and not isinstance(x, bool) for x in key
            ):
                raise StateFormatError(f"{where}: key must be a list of integers")
            weight = entry["weight"]
            if not isinstance(weight, (int, float)) or isinstance(weight, bool):
                raise StateFormatError(f"{where}: weight must be a number")
            key = tuple(key)
            if key in blocks:
                raise StateFormatError(f"{where}: duplicate key {key}")
            blocks[key] = (float(weight), _block_from_json(entry["block"], qregs, where))
        return CqState(cregs, qregs, blocks)
    raise StateFormatError(f"state: kind must be 'vector', 'density', or 'cq', got {kind!r}")


def save_state(state, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_json(state), fh, indent=1)
        fh.write("\n")


def load_state(path):
    with open(path, "r", encoding="utf-8") as fh:
        return state_from_json(json.load(fh))
