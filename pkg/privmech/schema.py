import copy
import enum
import json
import logging
import typing

import jsonschema
from packaging import version

from . import __version__
from .common import ConfigError, SchemaError

JSON_SCHEMA_DRAFT = "http://json-schema.org/draft-07/schema#"
LOGGER = logging.getLogger(__name__)

BASE_SCHEMA_MAP = {
    bool: {"type": "boolean"},
    int: {"type": "integer"},
    float: {"type": "number"},
    str: {"type": "string"},
    type(None): {"type": "null"},
}
ANY_SCHEMA = {
    "anyOf": [
        {"type": "object"},
        {"type": "array"},
        {"type": "null"},
        {"type": "string"},
        {"type": "boolean"},
        {"type": "integer"},
        {"type": "number"},
    ]
}

Schema = typing.Dict[str, typing.Any]

MechanismName = typing.Literal["election", "facility", "vcg"]
CommandName = typing.Literal["run", "audit", "bench", "schema"]
OutputFormat = typing.Literal["json", "csv"]
NeighborModel = typing.Literal["substitution", "add-remove"]
PrivacyName = typing.Literal["log-linear", "table"]
ScheduleName = typing.Literal["constant", "sqrt"]
GeneratorName = typing.Literal["fixed", "uniform", "skewed"]
PriorName = typing.Literal["uniform", "skewed"]
Report = typing.Union[str, int, typing.List[int], None]


class PrivacyPoint(typing.TypedDict):
    x: float
    f: float


class _InstanceMechanism(typing.TypedDict):
    mechanism: MechanismName


class InstanceFile(_InstanceMechanism, total=False):
    """
    A mechanism instance on disk. Election reports are "A", "B" or null, facility reports are 1-based location
    indices or null and VCG reports are outcome-indexed utility arrays or null.
    """

    profile: typing.List[Report]
    gap: float
    locations: typing.List[float]
    n_outcomes: int
    max_utility: int
    prior: typing.List[float]


class RunConfig(typing.TypedDict, total=False):
    version: str
    command: CommandName
    mech: MechanismName
    instance: typing.Union[str, InstanceFile]
    votes: str
    gap: float
    locations: typing.List[float]
    reports: typing.List[typing.Optional[int]]
    rows: typing.List[typing.Optional[typing.List[int]]]
    n_outcomes: int
    max_utility: int
    theta_size: int
    prior: typing.Union[PriorName, typing.List[float]]
    eps: float
    nu: float
    privacy: PrivacyName
    privacy_table: typing.List[PrivacyPoint]
    slack: float
    trials: int
    seed: int
    format: OutputFormat
    out: typing.Optional[str]
    claim: str
    neighbors: NeighborModel
    players: int
    noise_bound: int
    prior_step: float
    n_grid: typing.List[int]
    schedule: ScheduleName
    generator: GeneratorName
    symmetric_ties: bool


# Value ranges that the type annotations cannot express
CONSTRAINTS: typing.Dict[str, Schema] = {
    "eps": {"exclusiveMinimum": 0},
    "nu": {"minimum": 0},
    "slack": {"exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "trials": {"minimum": 1},
    "seed": {"minimum": 0},
    "players": {"minimum": 1},
    "noise_bound": {"minimum": 0},
    "prior_step": {"exclusiveMinimum": 0, "maximum": 1},
    "n_outcomes": {"minimum": 1},
    "max_utility": {"minimum": 1},
    "gap": {"exclusiveMinimum": 0},
    "theta_size": {"minimum": 1},
    "votes": {"pattern": "^[AB-]*$"},
}


def _is_typed_dict(annotation: typing.Any) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, dict) and hasattr(annotation, "__total__")


def _required_keys(typed_dict: type) -> typing.FrozenSet[str]:
    return frozenset(getattr(typed_dict, "__required_keys__", ()))


def get_json_schema_from_type(annotation: typing.Any) -> Schema:
    """
    Return the json schema of a type annotation.

    :param annotation: A base type, None, typing.Any, a List, Dict, Optional, Union or Literal subscript, an Enum or a
        TypedDict
    :return: A dictionary with the json schema
    """
    if annotation is None:
        return {"type": "null"}
    elif annotation is typing.Any:
        return copy.deepcopy(ANY_SCHEMA)
    elif annotation in BASE_SCHEMA_MAP:
        return copy.deepcopy(BASE_SCHEMA_MAP[annotation])
    elif _is_typed_dict(annotation):
        return get_json_schema_from_typed_dict(annotation)
    elif isinstance(annotation, type) and issubclass(annotation, enum.Enum):
        return {"enum": [member.value for member in annotation]}
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is list:
        return {"type": "array", "items": get_json_schema_from_type(args[0])}
    elif origin is dict:
        if args[0] is not str:
            raise SchemaError("typing.Dict keys must be strings")
        return {"type": "object", "additionalProperties": get_json_schema_from_type(args[1])}
    elif origin is typing.Literal:
        return {"enum": list(args)}
    elif origin is typing.Union:
        # Optional[X] arrives here as Union[X, None]
        return {"anyOf": [get_json_schema_from_type(arg) for arg in args]}
    raise SchemaError(
        f"Type '{annotation}' is invalid. Supported types are bool, int, float, str, None, typing.Any, List, "
        f"Dict, Optional, Union, Literal, Enum and TypedDict"
    )


def get_json_schema_from_typed_dict(
    typed_dict: type, constraints: typing.Optional[typing.Dict[str, Schema]] = None
) -> Schema:
    """
    Return the object schema of a TypedDict. Keys are required unless declared under total=False.

    :param typed_dict: The TypedDict class
    :param constraints: Extra keywords merged into the schema of the property with the same name
    :return: A dictionary with the json schema
    """
    constraints = CONSTRAINTS if constraints is None else constraints
    properties = {}
    required = []
    hints = typing.get_type_hints(typed_dict)
    for name, annotation in hints.items():
        properties[name] = get_json_schema_from_type(annotation)
        properties[name].update(constraints.get(name, {}))
        if name in _required_keys(typed_dict):
            required.append(name)
    return {
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": False,
    }


def document_schema(typed_dict: type) -> Schema:
    """The top-level draft-07 schema of a file format."""
    return {"$schema": JSON_SCHEMA_DRAFT, **get_json_schema_from_typed_dict(typed_dict)}


SCHEMAS = {
    "config": lambda: document_schema(RunConfig),
    "instance": lambda: document_schema(InstanceFile),
}


def validate_document(document: typing.Any, typed_dict: type, what: str) -> typing.Dict[str, typing.Any]:
    """
    Validate a decoded JSON document against the schema of a TypedDict.

    :param document: The decoded document
    :param typed_dict: RunConfig or InstanceFile
    :param what: Name of the document, used in the error message
    :return: The same document
    """
    validator = jsonschema.Draft7Validator(document_schema(typed_dict))
    error = jsonschema.exceptions.best_match(validator.iter_errors(document))
    if error is not None:
        location = "/".join(str(part) for part in error.absolute_path) or "<root>"
        raise ConfigError(f"The {what} is invalid at '{location}': {error.message}")
    return document


def check_version(config: RunConfig) -> None:
    """
    Reject configs written by a newer major version of privmech.

    :param config: A validated config
    """
    if "version" not in config:
        return
    try:
        written = version.parse(config["version"])
    except version.InvalidVersion:
        raise ConfigError(f"The config version '{config['version']}' is not a valid version")
    current = version.parse(__version__)
    if written.major > current.major:
        raise ConfigError(
            f"The config was written by privmech {written}, which is newer than this privmech {current}. "
            f"Upgrade privmech to read it"
        )


def _read_json(path: str, what: str) -> typing.Any:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as error:
        raise ConfigError(f"Cannot read the {what} '{path}': {error.strerror}")
    except json.JSONDecodeError as error:
        raise ConfigError(f"The {what} '{path}' is not valid JSON: {error.msg} at line {error.lineno}")


def load_config(path: str) -> RunConfig:
    LOGGER.info(f"Loading config {path} ...")
    config = validate_document(_read_json(path, "config file"), RunConfig, "config file")
    check_version(config)
    return config


def load_instance(source: typing.Union[str, typing.Dict[str, typing.Any]]) -> InstanceFile:
    """
    Load an instance from a JSON file path, or validate one given inline.

    :param source: A path or an already decoded instance
    :return: The validated instance
    """
    if isinstance(source, str):
        LOGGER.info(f"Loading instance {source} ...")
        source = _read_json(source, "instance file")
    return validate_document(source, InstanceFile, "instance")
