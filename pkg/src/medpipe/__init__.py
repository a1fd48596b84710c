"""Grid-enabled medical-image pipeline management."""

from __future__ import annotations

from .catalog import Catalog, ImageRecord, StudySet, check_homogeneity, evaluate_query, parse_predicate
from .enactor import Enactor, ExecutionResult, enact
from .glue import AdaptorContract, Glue, JobDescription, JobHandle, JobState
from .pipeline import Pipeline, ValidationReport, parse_pipeline, serialize_pipeline, validate
from .planner import ExecutionPlan, GridView, SiteDescriptor, plan
from .provenance import LineageGraph, ProvenanceEvent, ProvenanceStore, replay
from .states import State

__version__ = "0.1.0"

__all__ = [
    "AdaptorContract", "Catalog", "Enactor", "ExecutionPlan", "ExecutionResult", "Glue", "GridView",
    "ImageRecord", "JobDescription", "JobHandle", "JobState", "LineageGraph", "Pipeline",
    "ProvenanceEvent", "ProvenanceStore", "SiteDescriptor", "State", "StudySet", "ValidationReport",
    "check_homogeneity", "enact", "evaluate_query", "parse_pipeline", "parse_predicate", "plan",
    "replay", "serialize_pipeline", "validate",
]
