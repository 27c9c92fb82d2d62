"""
logger.py - Application-wide logging and run audit trail
Records experiment lifecycle events (meta-training progress, checkpoints,
fine-tune outcomes, solver holds, trial results) as JSONL next to app.log
"""

import json
import logging
import os
from pathlib import Path
from datetime import datetime
from typing import Dict, Any, Optional

from dotenv import load_dotenv

load_dotenv()

# Create logs directory if it doesn't exist
LOG_DIR = Path(os.getenv('ADAPTMPC_LOG_DIR', 'logs'))
LOG_DIR.mkdir(parents=True, exist_ok=True)

# Configure standard logging
logging.basicConfig(
    level=os.getenv('ADAPTMPC_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(LOG_DIR / 'app.log'),
        logging.StreamHandler()
    ]
)

logger = logging.getLogger(__name__)

SLOW_PHASE_MS = 60_000


def progress_enabled() -> bool:
    """tqdm bars are on unless ADAPTMPC_PROGRESS=0."""
    return os.getenv('ADAPTMPC_PROGRESS', '1') != '0'


class AuditTrail:
    """Append-only record of run events; never raises."""

    AUDIT_FILE = LOG_DIR / 'audit_trail.jsonl'

    @staticmethod
    def log_experiment_start(experiment: str, plant: str, trials: int, seed: int, output_dir: str):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'EXPERIMENT_START',
            'experiment': experiment,
            'plant': plant,
            'trials': trials,
            'seed': seed,
            'output_dir': output_dir
        }
        AuditTrail._write_entry(entry)
        logger.info(f"Starting {experiment} on {plant}: {trials} trials, seed {seed} -> {output_dir}")

    @staticmethod
    def log_meta_epoch(epoch: int, mean_query_loss: float, grad_norm: float):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'META_EPOCH',
            'epoch': epoch,
            'mean_query_loss': mean_query_loss,
            'grad_norm': grad_norm
        }
        AuditTrail._write_entry(entry)

    @staticmethod
    def log_checkpoint(path: str, param_count: int, epochs: int):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'CHECKPOINT_WRITTEN',
            'path': path,
            'param_count': param_count,
            'epochs': epochs
        }
        AuditTrail._write_entry(entry)
        logger.info(f"Meta checkpoint saved: {path} after {epochs} epochs")

    @staticmethod
    def log_finetune_summary(trial: int, kind: str, accepted: int, rejected: int, skipped: int):
        """One line per trial; per-event detail lives in the trace CSV."""
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'FINETUNE',
            'trial': trial,
            'kind': kind,
            'accepted': accepted,
            'rejected': rejected,
            'skipped': skipped
        }
        AuditTrail._write_entry(entry)
        if rejected:
            logger.warning(f"Trial {trial} [{kind}]: {rejected} fine-tune updates rejected")

    @staticmethod
    def log_solver_holds(trial: int, kind: str, holds: int):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'SOLVER_HOLD',
            'trial': trial,
            'kind': kind,
            'holds': holds
        }
        AuditTrail._write_entry(entry)
        logger.warning(f"Trial {trial} [{kind}]: solver held the last input {holds} times")

    @staticmethod
    def log_trial_result(trial: int, kind: str, metrics: Dict[str, Any]):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'TRIAL_RESULT',
            'trial': trial,
            'kind': kind,
            'metrics': metrics
        }
        AuditTrail._write_entry(entry)
        logger.info(f"Trial {trial} [{kind}] finished: {metrics}")

    @staticmethod
    def log_error(command: str, error_type: str, error_message: str, exit_code: int):
        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': 'ERROR',
            'command': command,
            'error_type': error_type,
            'error_message': error_message,
            'exit_code': exit_code
        }
        AuditTrail._write_entry(entry)
        logger.error(f"[{command}] {error_type}: {error_message}")

    @staticmethod
    def _write_entry(entry: Dict[str, Any]):
        """Append entry to JSONL audit file."""
        try:
            with open(AuditTrail.AUDIT_FILE, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry, default=str) + '\n')
        except Exception as e:
            logger.error(f"Failed to write audit entry: {e}")


class PerformanceMonitor:
    """Coarse phase timings (meta-training, one trial, aggregation)."""

    METRICS_FILE = LOG_DIR / 'metrics.jsonl'
    _timers = {}

    @staticmethod
    def start_timer(event_name: str):
        PerformanceMonitor._timers[event_name] = datetime.now()

    @staticmethod
    def end_timer(event_name: str, metadata: Optional[Dict] = None) -> Optional[float]:
        """End timing, append to metrics.jsonl and return the duration in ms."""
        if event_name not in PerformanceMonitor._timers:
            logger.warning(f"Timer {event_name} was never started")
            return None

        start_time = PerformanceMonitor._timers.pop(event_name)
        duration_ms = (datetime.now() - start_time).total_seconds() * 1000

        entry = {
            'timestamp': datetime.now().isoformat(),
            'event': event_name,
            'duration_ms': duration_ms,
            'metadata': metadata or {}
        }

        try:
            with open(PerformanceMonitor.METRICS_FILE, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry, default=str) + '\n')
        except Exception as e:
            logger.error(f"Failed to write metric: {e}")

        if duration_ms > SLOW_PHASE_MS:
            logger.warning(f"{event_name} took {duration_ms / 1000:.0f}s (slow)")
        return duration_ms


def log_run_end(experiment: str, output_dir: str):
    logger.info(f"=== {experiment} finished, outputs in {output_dir} ===")
