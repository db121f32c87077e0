"""Flat INI-style configuration: one section per subcommand, flags win over file values."""
from __future__ import annotations

import argparse
import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return cp


def _coerce(raw: str, action: argparse.Action):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{action.dest}: expected a boolean, got {raw!r}")
    if action.nargs in ("+", "*") or (isinstance(action.nargs, int) and action.nargs > 1):
        parts = raw.split()
        return [action.type(x) if action.type else x for x in parts]
    try:
        return action.type(raw) if action.type else raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{action.dest}: {exc}") from None


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, cp: configparser.ConfigParser,
                 section: str, explicit: set[str]) -> argparse.Namespace:
    """Fill ``args`` from ``[common]`` then ``[section]`` unless a flag set it explicitly."""
    actions = {a.dest: a for a in parser._actions}
    for sec in ("common", section):
        if not cp.has_section(sec):
            continue
        for key, raw in cp.items(sec):
            dest = key.replace("-", "_")
            if dest not in actions:
                if sec == "common":
                    continue
                raise ConfigError(f"[{sec}] unknown key {key!r}")
            if dest in explicit:
                continue
            setattr(args, dest, _coerce(raw, actions[dest]))
    return args


def explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Destinations whose option strings appear literally on the command line."""
    seen = set()
    for a in parser._actions:
        for opt in a.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                seen.add(a.dest)
    return seen
