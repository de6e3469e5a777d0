try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import typer

_config_file = Path(__file__).parent.parent / "pyproject.toml"
with _config_file.open("rb") as f:
    _config = tomllib.load(f)

_project_config = _config["project"]
_tool_config = _config["tool"]["config"]

CURVE_NAME = _tool_config["curve"]
POWER_TOTAL = float(_tool_config["power_total"])
WEAK_FRACTION = float(_tool_config["weak_fraction"])
H_STRONG = float(_tool_config["h_strong"])
H_WEAK = float(_tool_config["h_weak"])
NOISE_SIGMA = float(_tool_config["noise_sigma"])
SNR_DB = [float(v) for v in _tool_config["snr_db"]]
TRIALS = int(_tool_config["trials"])
BLOCK_BITS = int(_tool_config["block_bits"])
MIN_ERRORS = int(_tool_config["min_errors"])
MAX_BITS = int(_tool_config["max_bits"])
N_JOBS = int(_tool_config["n_jobs"])
ATTACK_TRIALS = int(_tool_config["attack_trials"])
OUTPUT_DIR = _tool_config["output_dir"]


def all_values() -> dict[str, object]:
    """Every inspectable configuration value, in display order."""
    return {
        "project_name": _project_config["name"],
        "project_version": _project_config["version"],
        "curve": CURVE_NAME,
        "power_total": POWER_TOTAL,
        "weak_fraction": WEAK_FRACTION,
        "h_strong": H_STRONG,
        "h_weak": H_WEAK,
        "noise_sigma": NOISE_SIGMA,
        "snr_db": SNR_DB,
        "min_errors": MIN_ERRORS,
        "max_bits": MAX_BITS,
        "output_dir": OUTPUT_DIR,
    }


# fmt: off
def config_cli(
    all: bool = typer.Option(False, "--all", help="Show all configuration values"),
    project_name: bool = typer.Option(False, "--project-name", help=_project_config['name']),
    project_version: bool = typer.Option(False, "--project-version", help=_project_config['version']),
    curve: bool = typer.Option(False, "--curve", help=CURVE_NAME),
    weak_fraction: bool = typer.Option(False, "--weak-fraction", help=str(WEAK_FRACTION)),
    min_errors: bool = typer.Option(False, "--min-errors", help=str(MIN_ERRORS)),
    output_dir: bool = typer.Option(False, "--output-dir", help=OUTPUT_DIR),
) -> None:
# fmt: on
    if all:
        for key, value in all_values().items():
            typer.echo(f"{key}={value}")
        return

    param_map = [
        (project_name, _project_config["name"]),
        (project_version, _project_config["version"]),
        (curve, CURVE_NAME),
        (weak_fraction, WEAK_FRACTION),
        (min_errors, MIN_ERRORS),
        (output_dir, OUTPUT_DIR),
    ]

    for is_set, value in param_map:
        if is_set:
            typer.echo(value)
            return

    typer.secho(
        "Error: No config key specified. Use --help to see available options.", fg=typer.colors.RED, err=True
    )
    raise typer.Exit(1)


def main():
    typer.run(config_cli)


if __name__ == "__main__":
    main()
