"""Shared pipeline, grid and catalog fixtures."""

from __future__ import annotations

import copy
from typing import Any

DIAMOND: dict[str, Any] = {
    "id": "diamond",
    "name": "diamond",
    "actors": {
        "gen": {
            "version": "1",
            "command": "sh -c 'cat {in:seed} > {out:out}; echo gen >> {out:out}'",
            "inputs": ["seed"],
            "outputs": ["out"],
        },
        "left": {
            "version": "1",
            "command": "sh -c 'cat {in:x} > {out:out}; echo left >> {out:out}'",
            "inputs": ["x"],
            "outputs": ["out"],
        },
        "right": {
            "version": "1",
            "command": "sh -c 'cat {in:x} > {out:out}; echo right >> {out:out}'",
            "inputs": ["x"],
            "outputs": ["out"],
        },
        "join": {
            "version": "1",
            "command": "sh -c 'cat {in:left} {in:right} > {out:out}'",
            "inputs": ["left", "right"],
            "outputs": ["out"],
        },
    },
    "tasks": {
        "a": {"actor": "gen", "version": "1", "params": {"seed": "42"}},
        "b": {"actor": "left", "version": "1"},
        "c": {"actor": "right", "version": "1"},
        "d": {"actor": "join", "version": "1"},
    },
    "edges": [
        {"from": "a.out", "to": "b.x"},
        {"from": "a.out", "to": "c.x"},
        {"from": "b.out", "to": "d.left"},
        {"from": "c.out", "to": "d.right"},
    ],
    "study_inputs": [],
}

# one study-fed task: output = input bytes plus a marker line
FANOUT: dict[str, Any] = {
    "id": "fanout",
    "actors": {
        "stamp": {
            "version": "1",
            "command": "sh -c 'cat {in:img} > {out:res}; echo stamped >> {out:res}'",
            "inputs": ["img"],
            "outputs": ["res"],
        }
    },
    "tasks": {"s": {"actor": "stamp", "version": "1"}},
    "edges": [],
    "study_inputs": ["s.img"],
}

# map over the study set, then reduce every mapped output in one task
MAP_REDUCE: dict[str, Any] = {
    "id": "mapreduce",
    "actors": {
        "stamp": FANOUT["actors"]["stamp"],
        "merge": {
            "version": "1",
            "command": "sh -c 'cat {in:parts} > {out:all}'",
            "inputs": ["parts"],
            "outputs": ["all"],
        },
    },
    "tasks": {
        "m": {"actor": "stamp", "version": "1"},
        "r": {"actor": "merge", "version": "1", "gather": True},
    },
    "edges": [{"from": "m.res", "to": "r.parts"}],
    "study_inputs": ["m.img"],
}

TWO_SITE_GRID: dict[str, Any] = {
    "sites": [
        {"site_id": "S1", "installed_actors": ["gen@1", "left@1", "right@1", "join@1", "stamp@1", "merge@1"], "slots": 1, "cost_hint": 1.0},
        {"site_id": "S2", "installed_actors": ["gen@1", "left@1", "right@1", "join@1", "stamp@1", "merge@1"], "slots": 1, "cost_hint": 1.0},
    ]
}


def doc(name: str) -> dict[str, Any]:
    return copy.deepcopy({"diamond": DIAMOND, "fanout": FANOUT, "mapreduce": MAP_REDUCE}[name])


def catalog_rows(n: int) -> list[dict[str, Any]]:
    rows = []
    for i in range(n):
        rows.append(
            {
                "image_id": f"img{i:03d}",
                "subject_id": f"sub{i:03d}",
                "header": {
                    "PatientName": f"Patient {i}",
                    "PatientID": f"P{i}",
                    "StudyDate": f"2021{(i % 12) + 1:02d}15",
                    "Modality": "MR",
                    "Age": str(60 + i),
                },
                "payload": f"voxels of image {i}\n",
            }
        )
    return rows
