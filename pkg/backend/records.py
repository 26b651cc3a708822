"""
Flat-file records
Header-tagged, tab-separated text files shared by every Trinity dump format
"""

import os
import tempfile

from errors import MalformedRecordError


def write_text_atomic(path, text):
    """Write to a temp file in the target directory, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_records(path, header, rows):
    """rows: iterable of already-formatted field sequences"""
    lines = [header]
    lines.extend("\t".join(fields) for fields in rows)
    write_text_atomic(path, "\n".join(lines) + "\n")


def parse_header(line, magic):
    """'#magic v1 d=32 J=4' -> {'d': '32', 'J': '4'}"""
    parts = line.strip().split()
    expected = magic.split()
    if parts[: len(expected)] != expected:
        return None
    params = {}
    for token in parts[len(expected):]:
        key, sep, value = token.partition("=")
        if not sep:
            return None
        params[key] = value
    return params


def read_records(path, magic, n_fields):
    """
    Returns (header params, [(line_number, fields), ...]).
    n_fields is an int or a tuple of accepted field counts.
    """
    accepted = (n_fields,) if isinstance(n_fields, int) else tuple(n_fields)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")

    if not lines or not lines[0].startswith("#"):
        raise MalformedRecordError(path, 1, f"missing header '{magic}'")
    params = parse_header(lines[0], magic)
    if params is None:
        raise MalformedRecordError(path, 1, f"expected header '{magic}', got '{lines[0].strip()}'")

    records = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) not in accepted:
            raise MalformedRecordError(path, number, f"expected {' or '.join(map(str, accepted))} fields, got {len(fields)}")
        records.append((number, fields))
    return params, records


def format_vector(vector):
    return ",".join(repr(float(x)) for x in vector)


def parse_int(path, number, text, name):
    try:
        return int(text)
    except ValueError:
        raise MalformedRecordError(path, number, f"{name} is not an integer: '{text}'") from None


def parse_float(path, number, text, name):
    try:
        return float(text)
    except ValueError:
        raise MalformedRecordError(path, number, f"{name} is not a number: '{text}'") from None


def parse_vector(path, number, text, dim=None):
    try:
        values = [float(x) for x in text.split(",")] if text else []
    except ValueError:
        raise MalformedRecordError(path, number, f"bad vector '{text[:40]}'") from None
    if dim is not None and len(values) != dim:
        raise MalformedRecordError(path, number, f"vector has {len(values)} components, expected {dim}")
    return values
