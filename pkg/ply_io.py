#!/usr/bin/env python3
"""
Lecture / écriture PLY (ascii et binary_little_endian) pour les nuages FocusReg.
Propriétés reconnues: x, y, z (float ou double), nx, ny, nz optionnels, instance_id (int32).
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from geom_core import PointCloud

logger = logging.getLogger(__name__)

PLY_TYPES = {
    'char': 'i1', 'int8': 'i1',
    'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2',
    'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4',
    'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4',
    'double': 'f8', 'float64': 'f8',
}
FORMATS = ('ascii', 'binary_little_endian')


class PlyFormatError(ValueError):
    """Fichier PLY illisible (en-tête, types ou données)."""


def _parse_header(raw: bytes) -> Tuple[str, int, List[Tuple[str, str]], int, int]:
    """Retourne (format, nb sommets, propriétés, offset des données, nb lignes d'en-tête)."""
    marker = raw.find(b'end_header')
    if not raw.startswith(b'ply') or marker < 0:
        raise PlyFormatError("ligne 1: en-tête PLY absent ou non terminé")
    end = raw.find(b'\n', marker)
    end = len(raw) if end < 0 else end + 1
    lines = raw[:end].decode('ascii', errors='replace').splitlines()

    fmt = None
    n_vertices = None
    properties: List[Tuple[str, str]] = []
    current = None
    for lineno, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens or tokens[0] in ('ply', 'comment', 'obj_info', 'end_header'):
            continue
        if tokens[0] == 'format':
            if len(tokens) < 2 or tokens[1] not in FORMATS:
                raise PlyFormatError(f"ligne {lineno}: format non supporté '{line.strip()}'")
            fmt = tokens[1]
        elif tokens[0] == 'element':
            if len(tokens) != 3:
                raise PlyFormatError(f"ligne {lineno}: élément mal formé '{line.strip()}'")
            current = tokens[1]
            if current == 'vertex':
                if n_vertices is not None or properties:
                    raise PlyFormatError(f"ligne {lineno}: élément vertex dupliqué")
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise PlyFormatError(f"ligne {lineno}: nombre de sommets invalide '{tokens[2]}'")
            elif n_vertices is None:
                raise PlyFormatError(f"ligne {lineno}: l'élément vertex doit venir en premier")
        elif tokens[0] == 'property':
            if current != 'vertex':
                continue
            if len(tokens) != 3 or tokens[1] == 'list':
                raise PlyFormatError(f"ligne {lineno}: propriété de sommet non supportée '{line.strip()}'")
            if tokens[1] not in PLY_TYPES:
                raise PlyFormatError(f"ligne {lineno}: type inconnu '{tokens[1]}'")
            properties.append((tokens[2], PLY_TYPES[tokens[1]]))
        else:
            raise PlyFormatError(f"ligne {lineno}: mot-clé inconnu '{tokens[0]}'")

    if fmt is None:
        raise PlyFormatError("en-tête: ligne format manquante")
    if n_vertices is None or n_vertices < 0:
        raise PlyFormatError("en-tête: élément vertex manquant")
    names = [name for name, _ in properties]
    for axis in ('x', 'y', 'z'):
        if axis not in names:
            raise PlyFormatError(f"en-tête: propriété '{axis}' manquante")
    return fmt, n_vertices, properties, end, len(lines)


def read_ply(path) -> PointCloud:
    """Lit un nuage PLY; les float32 sont convertis en float64 sans perte."""
    raw = Path(path).read_bytes()
    fmt, n, properties, offset, header_lines = _parse_header(raw)
    dtype = np.dtype([(name, '<' + code) for name, code in properties])

    if fmt == 'binary_little_endian':
        needed = n * dtype.itemsize
        if len(raw) - offset < needed:
            raise PlyFormatError(
                f"données binaires tronquées: {len(raw) - offset} octets pour {needed} attendus"
            )
        data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset) if n else np.empty(0, dtype=dtype)
    else:
        body = raw[offset:].decode('ascii', errors='replace').splitlines()
        rows = [line.split() for line in body if line.strip()]
        if len(rows) < n:
            raise PlyFormatError(f"ligne {header_lines + len(rows) + 1}: {n} sommets annoncés, {len(rows)} trouvés")
        data = np.empty(n, dtype=dtype)
        for i in range(n):
            row = rows[i]
            if len(row) < len(properties):
                raise PlyFormatError(f"ligne {header_lines + i + 1}: {len(row)} valeurs pour {len(properties)} propriétés")
            try:
                data[i] = tuple(
                    np.array(token, dtype=code).item() for token, (_, code) in zip(row, properties)
                )
            except ValueError:
                raise PlyFormatError(f"ligne {header_lines + i + 1}: valeur non numérique")

    points = np.stack([data['x'], data['y'], data['z']], axis=1).astype(np.float64)
    names = dtype.names
    labels = data['instance_id'].astype(np.int64) if 'instance_id' in names else None
    normals = None
    if all(axis in names for axis in ('nx', 'ny', 'nz')):
        normals = np.stack([data['nx'], data['ny'], data['nz']], axis=1).astype(np.float64)
    try:
        return PointCloud(points, labels, normals)
    except ValueError as e:
        raise PlyFormatError(f"contenu invalide: {e}")


def _format_value(value, code: str) -> str:
    if code.startswith('f'):
        return np.format_float_positional(value, unique=True, trim='-')
    return str(int(value))


def write_ply(path, cloud: PointCloud, binary: bool = True, precision: str = 'float32',
              comment: Optional[str] = None) -> None:
    """Écrit un nuage PLY (instance_id si labels, nx/ny/nz si normales)."""
    if precision not in ('float32', 'float64'):
        raise ValueError(f"Précision inconnue: {precision}")
    code = 'f4' if precision == 'float32' else 'f8'
    ply_type = 'float' if precision == 'float32' else 'double'

    fields = [('x', code), ('y', code), ('z', code)]
    if cloud.normals is not None:
        fields += [('nx', code), ('ny', code), ('nz', code)]
    if cloud.labels is not None:
        fields.append(('instance_id', 'i4'))
    dtype = np.dtype([(name, '<' + c) for name, c in fields])

    data = np.empty(len(cloud), dtype=dtype)
    for axis, column in zip('xyz', cloud.points.T):
        data[axis] = column
    if cloud.normals is not None:
        for axis, column in zip(('nx', 'ny', 'nz'), cloud.normals.T):
            data[axis] = column
    if cloud.labels is not None:
        data['instance_id'] = cloud.labels

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if comment:
        header.append(f"comment {comment}")
    header.append(f"element vertex {len(cloud)}")
    for name, c in fields:
        header.append(f"property {'int' if c == 'i4' else ply_type} {name}")
    header.append("end_header")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(('\n'.join(header) + '\n').encode('ascii'))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((' '.join(_format_value(row[name], c) for name, c in fields) + '\n').encode('ascii'))
    logger.debug("PLY écrit: %s (%d points)", path, len(cloud))
