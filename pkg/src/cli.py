"""noma-sim: keys, the identity ledger, scenario runs, BER sweeps, attacks and reports."""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import typer

from src import config
from src.crypto import KeyRole
from src.crypto import derive_private_key
from src.crypto import generate_base_station_key
from src.crypto import load_key_file
from src.crypto import save_key_file
from src.datamodels import RegistrationRecord
from src.errors import ConfigError
from src.errors import InvalidConfig
from src.errors import NomaHandoverError
from src.errors import ValidationError
from src.ledger import ledger_init
from src.ledger import ledger_transaction
from src.ledger import load_ledger
from src.ledger import register_public_key
from src.ledger import save_ledger
from src.ledger import verify_chain
from src.scenario import OUTPUT_FORMATS
from src.scenario import REPORT_FILE
from src.scenario import ScenarioConfig
from src.scenario import ber_sweep
from src.scenario import emit_feature_report
from src.scenario import load_config
from src.scenario import run_attacks
from src.scenario import run_scenario
from src.scenario import verify_feature_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RECOVERY_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_INTERNAL_ERROR = 3

LEDGER_FILE = "ledger.jsonl"
LEDGER_HELP = "Ledger file (default: <out>/ledger.jsonl)"

app = typer.Typer(help="Blockchain-secured NOMA data handover simulator.", no_args_is_help=True)
ledger_app = typer.Typer(help="Inspect and extend the identity ledger.", no_args_is_help=True)
app.add_typer(ledger_app, name="ledger")


@dataclass
class CliState:
    config_path: Path | None
    seed: int | None
    out_dir: Path
    fmt: str

    def scenario(self) -> ScenarioConfig:
        if self.config_path is None:
            raise ValidationError("config", "pass a scenario file with --config")
        return load_config(self.config_path, seed_override=self.seed)


def _fail(message: str, code: int) -> typer.Exit:
    typer.secho(f"Error: {message}", fg=typer.colors.RED, err=True)
    return typer.Exit(code)


@contextmanager
def exit_codes():
    """Map package errors onto the documented exit codes."""
    try:
        yield
    except (ConfigError, InvalidConfig) as e:
        raise _fail(str(e), EXIT_CONFIG_ERROR) from e
    except NomaHandoverError as e:
        raise _fail(f"{type(e).__name__}: {e}", EXIT_INTERNAL_ERROR) from e


@app.callback()
def main_options(
    ctx: typer.Context,
    config_path: Optional[Path] = typer.Option(None, "--config", help="Scenario file (TOML)"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help="Override the scenario seed"),
    out: Path = typer.Option(Path(config.OUTPUT_DIR), "--out", help="Directory for every output file"),
    fmt: str = typer.Option("csv", "--format", help="Table format: json or csv"),
) -> None:
    if fmt not in OUTPUT_FORMATS:
        raise _fail(f"--format must be one of {', '.join(OUTPUT_FORMATS)}", EXIT_CONFIG_ERROR)
    ctx.obj = CliState(config_path=config_path, seed=seed, out_dir=out, fmt=fmt)


@app.command()
def keygen(
    ctx: typer.Context,
    ue: Optional[str] = typer.Option(None, "--ue", help="Derive this UE's key from its scenario identity"),
    base_station: bool = typer.Option(False, "--base-station", help="Generate PR_B from the seed"),
    output: Optional[Path] = typer.Option(None, "--output", help="Key file path"),
) -> None:
    """Write a key file holding a private scalar and its compressed public key."""
    state: CliState = ctx.obj
    with exit_codes():
        if base_station == (ue is not None):
            raise ValidationError("keygen", "choose exactly one of --ue or --base-station")
        if base_station:
            if state.seed is None:
                raise ValidationError("seed", "--seed is required to generate PR_B")
            private_key = generate_base_station_key(np.random.default_rng([state.seed, 4]).bytes)
            name = KeyRole.BASE_STATION.value
        else:
            identities = {spec.ue_id: spec.identity for spec in state.scenario().ues}
            if ue not in identities:
                raise ValidationError("ue", f"{ue} is not defined in {state.config_path}")
            private_key = derive_private_key(identities[ue])
            name = ue
        path = output or state.out_dir / "keys" / f"{name}.toml"
        public_key = save_key_file(path, private_key)
        typer.echo(f"{path} {public_key.to_hex()}")


def _ledger_path(state: CliState, ledger: Path | None) -> Path:
    return ledger or state.out_dir / LEDGER_FILE


def _existing_ledger(state: CliState, ledger: Path | None) -> Path:
    path = _ledger_path(state, ledger)
    if not path.exists():
        raise ValidationError("ledger", f"{path} not found; run 'ledger init' first")
    return path


@ledger_app.command("init")
def ledger_init_cmd(
    ctx: typer.Context,
    ledger: Optional[Path] = typer.Option(None, "--ledger", help=LEDGER_HELP),
    force: bool = typer.Option(False, "--force", help="Overwrite an existing ledger"),
) -> None:
    """Create a ledger holding only the genesis block."""
    path = _ledger_path(ctx.obj, ledger)
    if path.exists() and not force:
        raise _fail(f"{path} already exists; pass --force to overwrite", EXIT_CONFIG_ERROR)
    save_ledger(ledger_init(), path)
    typer.echo(f"⛓️ Initialised {path}")


@ledger_app.command("register")
def ledger_register_cmd(
    ctx: typer.Context,
    key: Path = typer.Option(..., "--key", help="UE key file written by keygen"),
    ue_id: str = typer.Option(..., "--ue-id", help="Identifier recorded with the public key"),
    registered_at_ms: int = typer.Option(0, "--registered-at-ms", min=0, help="Registration time"),
    ledger: Optional[Path] = typer.Option(None, "--ledger", help=LEDGER_HELP),
) -> None:
    """Append a public key to the ledger; duplicates are rejected."""
    path = _ledger_path(ctx.obj, ledger)
    with exit_codes():
        _, public_key = load_key_file(key)
        with ledger_transaction(path) as chain:
            record = RegistrationRecord(ue_id, public_key.to_bytes(), registered_at_ms)
            block = register_public_key(chain, record)
        typer.echo(f"{ue_id} block={block.index} hash={block.block_hash.hex()}")


@ledger_app.command("verify")
def ledger_verify_cmd(
    ctx: typer.Context,
    ledger: Optional[Path] = typer.Option(None, "--ledger", help=LEDGER_HELP),
) -> None:
    """Recompute every hash and link; exit 1 on the first offending block."""
    with exit_codes():
        verdict = verify_chain(load_ledger(_existing_ledger(ctx.obj, ledger)))
    typer.echo(json.dumps(verdict.to_dict()))
    if not verdict:
        raise typer.Exit(EXIT_RECOVERY_FAILURE)


@ledger_app.command("show")
def ledger_show_cmd(
    ctx: typer.Context,
    ledger: Optional[Path] = typer.Option(None, "--ledger", help=LEDGER_HELP),
) -> None:
    """Print every block."""
    state: CliState = ctx.obj
    with exit_codes():
        chain = load_ledger(_existing_ledger(state, ledger))
    if state.fmt == "json":
        for block in chain.blocks:
            typer.echo(json.dumps(block.to_dict()))
        return
    rows = [
        {
            "index": block.index,
            "ue_id": block.payload.ue_id,
            "public_key": block.payload.public_key.hex(),
            "registered_at_ms": block.payload.registered_at_ms,
            "prev_hash": block.prev_hash.hex(),
            "block_hash": block.block_hash.hex(),
        }
        for block in chain.blocks
    ]
    typer.echo(pd.DataFrame(rows).to_csv(index=False), nl=False)


@app.command()
def run(ctx: typer.Context) -> None:
    """Run the configured handover end-to-end and write its trace and outcomes."""
    state: CliState = ctx.obj
    with exit_codes():
        result = run_scenario(state.scenario(), state.out_dir)
    for outcome in result.outcomes:
        status = "✅" if outcome["status"] == "recovered" else "❌"
        typer.echo(f"{status} {outcome['ue_id']} ({outcome['role']}): {outcome['error'] or 'recovered'}")
    for key, value in sorted(result.observations.items()):
        if not key.endswith("_hex"):
            typer.echo(f"{key}={value}")
    if result.sessions > 1:
        typer.echo(f"delivery_failure_rate={json.dumps(result.delivery_failure_rate)}")
    raise typer.Exit(result.exit_code)


@app.command()
def ber(
    ctx: typer.Context,
    progress: bool = typer.Option(False, "--progress", help="Show a progress bar"),
) -> None:
    """Monte-Carlo BER sweep against the closed-form curves."""
    state: CliState = ctx.obj
    with exit_codes():
        result = ber_sweep(state.scenario(), state.out_dir, fmt=state.fmt, progress=progress)
    typer.echo(result.table.to_string(index=False))
    typer.echo(f"max_deviation_standard_errors={result.max_deviation:.3f}")
    typer.echo(f"table={result.table_path}")


@app.command()
def attack(ctx: typer.Context) -> None:
    """Run the adversary suite against the configured scheme."""
    state: CliState = ctx.obj
    with exit_codes():
        report = run_attacks(state.scenario(), state.out_dir)
    for verdict in report.verdicts:
        typer.echo(f"{verdict.test_id} {verdict.outcome} {verdict.blocked}/{verdict.trials}")


@app.command()
def report(
    ctx: typer.Context,
    verify: bool = typer.Option(False, "--verify", help="Re-hash the artifacts of an existing report"),
) -> None:
    """Emit the feature-comparison report from earlier run and attack outputs."""
    state: CliState = ctx.obj
    if verify:
        path = state.out_dir / f"{REPORT_FILE}.json"
        if not path.exists():
            raise _fail(f"{path} not found", EXIT_INTERNAL_ERROR)
        problems = verify_feature_report(path)
        for problem in problems:
            typer.secho(problem, fg=typer.colors.RED, err=True)
        if problems:
            raise typer.Exit(EXIT_RECOVERY_FAILURE)
        typer.echo(f"✅ {path} matches its artifacts")
        return

    with exit_codes():
        feature_report = emit_feature_report(state.out_dir, fmt=state.fmt)
    for row in feature_report.rows:
        typer.echo(f"{row.verdict:4} {row.feature}: {row.proposed} | baseline: {row.baseline}")


def main():
    logging.basicConfig(level=logging.INFO)
    try:
        app()
    except Exception as e:  # pragma: no cover
        typer.secho(f"Error: internal failure: {e}", fg=typer.colors.RED, err=True)
        raise SystemExit(EXIT_INTERNAL_ERROR) from e


if __name__ == "__main__":
    main()
