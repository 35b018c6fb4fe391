"""JSON Schema validation for pipeline files and reports."""
import logging
from typing import Any

import jsonschema

from .config import HAZARD_KEYS

logger = logging.getLogger(__name__)

_BOX_NUMBER = {"type": "number", "minimum": 0, "maximum": 1}

# Schema definitions
SCHEMAS = {
    "detection_file": {
        "type": "object",
        "properties": {
            "image": {"type": "string", "minLength": 1},
            "detections": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "class": {"type": "string"},
                        "cx": _BOX_NUMBER,
                        "cy": _BOX_NUMBER,
                        "w": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "h": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "score": _BOX_NUMBER,
                    },
                    "required": ["class", "cx", "cy", "w", "h", "score"],
                },
            },
        },
        "required": ["image", "detections"],
    },
    "manifest_header": {
        "type": "object",
        "properties": {
            "manifest_version": {"type": "string"},
            "category_vocabulary": {"type": "array", "items": {"type": "string"}},
        },
        "required": ["manifest_version"],
    },
    "manifest_record": {
        "type": "object",
        "properties": {
            "image": {"type": "string", "minLength": 1},
            "hazards": {"type": "array", "items": {"type": "string"}},
            "rationales": {
                "type": "object",
                "additionalProperties": {"type": "string"},
            },
            "source": {"type": "string", "enum": ["historical_inspection", "public_dataset"]},
            "validation": {"type": "string", "enum": ["draft", "validated", "revised", "rejected"]},
            "history": {"type": "array", "items": {"type": "object"}},
            "warnings": {"type": "array", "items": {"type": "string"}},
        },
        "required": ["image", "hazards", "rationales", "source", "validation"],
    },
    "transcript": {
        "type": "object",
        "properties": {
            "digest": {"type": "string"},
            "model": {"type": "string"},
            "response": {"type": "string"},
            "latency": {"type": "number", "minimum": 0},
            "token_usage": {"type": ["object", "null"]},
        },
        "required": ["digest", "response", "latency"],
    },
    "category_file": {
        "type": "object",
        "properties": {key: {"type": "string", "minLength": 1} for key in HAZARD_KEYS},
        "required": HAZARD_KEYS,
        "additionalProperties": False,
    },
    "run_report": {
        "type": "object",
        "properties": {
            "report_version": {"type": "string"},
            "run": {"type": "object"},
            "per_image": {"type": "array", "items": {"type": "object"}},
            "corpus": {"type": "object"},
            "errors": {"type": "object"},
            "timing": {"type": "object"},
        },
        "required": ["report_version", "run", "per_image", "corpus", "errors", "timing"],
    },
}


def validate_output(data: Any, schema_name: str) -> tuple[bool, str]:
    """Validate data against a named schema.

    Args:
        data: The data to validate
        schema_name: Name of the schema to validate against

    Returns:
        Tuple of (is_valid, error_message)
    """
    if schema_name not in SCHEMAS:
        return False, f"Unknown schema: {schema_name}"

    try:
        jsonschema.validate(data, SCHEMAS[schema_name])
        return True, ""
    except jsonschema.ValidationError as e:
        location = "/".join(str(part) for part in e.absolute_path)
        error_msg = f"Schema validation failed for {schema_name}"
        if location:
            error_msg += f" at '{location}'"
        error_msg += f": {e.message}"
        logger.debug(error_msg)
        return False, error_msg
