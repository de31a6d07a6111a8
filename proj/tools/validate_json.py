#!/usr/bin/env python3
"""Validate JSON documents (or NDJSON streams) against the shipped schemas."""

import argparse
import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource

SCHEMA_DIR = pathlib.Path(__file__).resolve().parent.parent / "schemas"


def registry(schema_dir=SCHEMA_DIR):
    resources = []
    for path in sorted(pathlib.Path(schema_dir).glob("*.schema.json")):
        resources.append((path.name, Resource.from_contents(json.loads(path.read_text()))))
    return Registry().with_resources(resources)


def validator(name, schema_dir=SCHEMA_DIR):
    reg = registry(schema_dir)
    schema = reg.contents(name)
    cls = jsonschema.validators.validator_for(schema)
    cls.check_schema(schema)
    return cls(schema, registry=reg)


def validate(name, instance, schema_dir=SCHEMA_DIR):
    """Raises jsonschema.ValidationError when `instance` does not conform."""
    validator(name, schema_dir).validate(instance)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("schema", help="schema file name, e.g. manifest.schema.json")
    parser.add_argument("files", nargs="+")
    parser.add_argument("--ndjson", action="store_true", help="validate every line separately")
    parser.add_argument("--schemas", default=str(SCHEMA_DIR))
    args = parser.parse_args()
    v = validator(args.schema, args.schemas)
    failures = 0
    for f in args.files:
        text = pathlib.Path(f).read_text()
        docs = [json.loads(line) for line in text.splitlines() if line.strip()] if args.ndjson else [json.loads(text)]
        for i, doc in enumerate(docs):
            errors = sorted(v.iter_errors(doc), key=lambda e: list(e.path))
            for e in errors:
                failures += 1
                where = "/".join(str(p) for p in e.path) or "<root>"
                suffix = f" line {i + 1}" if args.ndjson else ""
                print(f"{f}{suffix}: {where}: {e.message}", file=sys.stderr)
    if failures:
        sys.exit(1)
    print(f"{len(args.files)} file(s) valid against {args.schema}")


if __name__ == "__main__":
    main()
