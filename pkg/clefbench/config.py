import logging
import logging.handlers
import os
from configparser import RawConfigParser
from shutil import copyfile

from clefbench.errors import ValidationError

home = os.path.expanduser("~")
config_path = os.path.join(home, ".clefbench")

DEFAULT_CONFIG_FILE = os.path.join(config_path, "config.ini")
EXAMPLE_CONFIG_FILE = os.path.join(os.path.dirname(__file__), "example_config.ini")
LOG_NAME = "clefbench.log"

FILE_FORMAT = "%(asctime)s %(name)-8s %(levelname)-8s %(message)s"
CONSOLE_FORMAT = "%(name)-6s: %(levelname)-8s %(message)s"

logger = logging.getLogger("CONFIG")

_console_handler = None


def setup_logging(log_dir=None, debug=False):
    """Log everything to a rotating file in log_dir, and INFO (or DEBUG) to stderr
    """
    global _console_handler
    root = logging.getLogger("")
    root.setLevel(logging.DEBUG)
    if _console_handler is not None:
        root.removeHandler(_console_handler)
    # console goes to sys.stderr so stdout stays clean for summaries
    _console_handler = logging.StreamHandler()
    _console_handler.setLevel(logging.DEBUG if debug else logging.INFO)
    _console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root.addHandler(_console_handler)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, LOG_NAME)
        already = any(
            isinstance(h, logging.handlers.RotatingFileHandler)
            and h.baseFilename == os.path.abspath(log_file)
            for h in root.handlers
        )
        if not already:
            rh = logging.handlers.RotatingFileHandler(
                log_file, maxBytes=500000, backupCount=2
            )
            rh.setLevel(logging.DEBUG)
            rh.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%m-%d %H:%M"))
            root.addHandler(rh)
    # trio is chatty at debug level
    logging.getLogger("trio").setLevel(logging.WARNING)


def get_config_file(explicit=None):
    """Resolve the config file: explicit path, $CLEFBENCH_CONFIG, or the user
    config (copied from the packaged example on first use)
    """
    if explicit:
        if not os.path.exists(explicit):
            raise ValidationError(f"Config file {explicit} not found")
        return explicit
    env = os.environ.get("CLEFBENCH_CONFIG")
    if env:
        return env
    if not os.path.exists(DEFAULT_CONFIG_FILE):
        logger.info(f"Config file not found, copying example config to {config_path}")
        os.makedirs(config_path, exist_ok=True)
        copyfile(EXAMPLE_CONFIG_FILE, DEFAULT_CONFIG_FILE)
    return DEFAULT_CONFIG_FILE


def create_config(config_file=None):
    parser = RawConfigParser()
    # option names are dataclass field names, keep their case
    parser.optionxform = str
    parser.read(config_file or EXAMPLE_CONFIG_FILE)
    return parser


def get_bool(value):
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"{value!r} is not a boolean")


def get_list(value, cast=str):
    """Comma separated list, blanks dropped"""
    items = [v.strip() for v in str(value).split(",")]
    try:
        return [cast(v) for v in items if v]
    except ValueError as e:
        raise ValidationError(f"Bad list value {value!r}: {e}")


def section_values(parser, section, fields):
    """Pull the keys of `section` that name one of `fields`, cast to each
    field's type. Unknown keys are a validation error.
    """
    if not parser.has_section(section):
        return {}
    result = {}
    for key, raw in parser.items(section):
        if key not in fields:
            raise ValidationError(f"Unknown key [{section}] {key}")
        cast = fields[key]
        try:
            if cast is bool:
                result[key] = get_bool(raw)
            elif cast is None:
                result[key] = raw.strip()
            else:
                result[key] = cast(raw)
        except ValueError as e:
            raise ValidationError(f"[{section}] {key} = {raw!r}: {e}")
    return result
