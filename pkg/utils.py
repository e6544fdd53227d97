import os
import time

import pandas as pd
from dotenv import load_dotenv
from sqlalchemy import create_engine, text
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.pool import QueuePool

from stream_core_vm import TimingParams

load_dotenv()

DEFAULT_DATABASE_URL = "sqlite:///saris_results.db"
METRIC_COLUMNS = ["cycles", "fpu_util", "ipc", "speedup", "dma_bw_util", "imbalance_max"]

_engines = {}


def env_int(name, default):
    """Integer setting from the environment; blank or malformed values fall back to the default."""
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        print(f"⚠️ Ignoring {name}={raw!r}: not an integer", flush=True)
        return default


def timing_from_env():
    return TimingParams(
        fpu_latency=env_int("SARIS_FPU_LATENCY", 3),
        tcdm_latency=env_int("SARIS_TCDM_LATENCY", 1),
        fifo_depth=env_int("SARIS_FIFO_DEPTH", 4),
        frep_length=env_int("SARIS_FREP_LENGTH", 16),
        fpu_queue_depth=env_int("SARIS_FPU_QUEUE_DEPTH", 8),
        icache_penalty=env_int("SARIS_ICACHE_PENALTY", 0),
    )


def get_engine(url=None):
    """One pooled engine per database URL."""
    url = url or os.getenv("DATABASE_URL") or DEFAULT_DATABASE_URL
    if url not in _engines:
        if url.startswith("sqlite"):
            _engines[url] = create_engine(url)
        else:
            _engines[url] = create_engine(
                url,
                poolclass=QueuePool,
                pool_size=5,
                max_overflow=10,
                pool_timeout=30,
                pool_recycle=1800,
                pool_pre_ping=True,
            )
    return _engines[url]


def get_db_connection(url=None):
    """Get database connection with retry logic"""
    max_retries = 3
    retry_delay = 1

    for attempt in range(max_retries):
        try:
            conn = get_engine(url).connect()
            conn.execute(text("SELECT 1"))
            return conn
        except SQLAlchemyError as e:
            if attempt == max_retries - 1:
                print(f"⛔ Failed to connect to database after {max_retries} attempts: {e}", flush=True)
                raise
            time.sleep(retry_delay)
            retry_delay *= 2


def init_db(url=None):
    """Create the suite_results table."""
    try:
        with get_engine(url).begin() as conn:
            conn.execute(text("""
                CREATE TABLE IF NOT EXISTS suite_results (
                    run_key TEXT NOT NULL,
                    kernel TEXT NOT NULL,
                    variant TEXT NOT NULL,
                    cycles INTEGER NOT NULL DEFAULT 0,
                    fpu_util DOUBLE PRECISION NOT NULL DEFAULT 0,
                    ipc DOUBLE PRECISION NOT NULL DEFAULT 0,
                    speedup DOUBLE PRECISION NOT NULL DEFAULT 0,
                    dma_bw_util DOUBLE PRECISION NOT NULL DEFAULT 0,
                    imbalance_max DOUBLE PRECISION NOT NULL DEFAULT 0,
                    PRIMARY KEY (run_key, kernel, variant)
                )
            """))
            conn.execute(text(
                "CREATE INDEX IF NOT EXISTS idx_suite_kernel ON suite_results(kernel, variant)"
            ))
    except SQLAlchemyError as e:
        print(f"⛔ Database initialization error: {e}", flush=True)
        raise


def save_report_data(run_key, metrics_df, url=None):
    """Replace the rows of one run; rows of other runs are preserved."""
    if metrics_df.empty:
        return

    try:
        with get_engine(url).begin() as conn:
            conn.execute(text("DELETE FROM suite_results WHERE run_key = :run_key"),
                         {"run_key": run_key})
            for _, row in metrics_df.iterrows():
                conn.execute(text("""
                    INSERT INTO suite_results
                    (run_key, kernel, variant, cycles, fpu_util, ipc, speedup, dma_bw_util, imbalance_max)
                    VALUES
                    (:run_key, :kernel, :variant, :cycles, :fpu_util, :ipc, :speedup, :dma_bw_util, :imbalance_max)
                    ON CONFLICT (run_key, kernel, variant)
                    DO UPDATE SET
                        cycles = excluded.cycles,
                        fpu_util = excluded.fpu_util,
                        ipc = excluded.ipc,
                        speedup = excluded.speedup,
                        dma_bw_util = excluded.dma_bw_util,
                        imbalance_max = excluded.imbalance_max
                """), {
                    "run_key": run_key,
                    "kernel": row["kernel"],
                    "variant": row["variant"],
                    "cycles": int(row["cycles"]),
                    # speedup is blank when a run has no base row
                    **{col: float(row[col]) if pd.notna(row[col]) else 0.0 for col in METRIC_COLUMNS[1:]},
                })
    except SQLAlchemyError as e:
        print(f"⛔ Error saving results: {e}", flush=True)
        raise


def get_report_data(run_key, url=None):
    """Rows of one run in canonical kernel/variant order; empty on database errors."""
    try:
        with get_engine(url).connect() as conn:
            result = conn.execute(text("""
                SELECT kernel, variant, cycles, fpu_util, ipc, speedup, dma_bw_util, imbalance_max
                FROM suite_results
                WHERE run_key = :run_key
                ORDER BY kernel, variant
            """), {"run_key": run_key})
            return pd.DataFrame(result.fetchall(), columns=list(result.keys()))
    except SQLAlchemyError as e:
        print(f"⚠️ Error retrieving results: {e}", flush=True)
        return pd.DataFrame()


def get_run_keys(url=None):
    try:
        with get_engine(url).connect() as conn:
            result = conn.execute(text("SELECT DISTINCT run_key FROM suite_results ORDER BY run_key"))
            return [row[0] for row in result]
    except SQLAlchemyError as e:
        print(f"⚠️ Error listing runs: {e}", flush=True)
        return []
