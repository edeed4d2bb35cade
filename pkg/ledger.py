import logging
from contextlib import contextmanager
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

from sqlalchemy import create_engine, select
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, sessionmaker

from models import Base, ClassifierArtifact, RunRecord, StageTiming

# Configure logging
logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def _session_factory(url: str):
    engine = create_engine(url, pool_pre_ping=True)
    Base.metadata.create_all(engine)
    logger.info("Ledger tables created")
    return sessionmaker(bind=engine, expire_on_commit=False)


@contextmanager
def ledger_session(url: str):
    session: Session = _session_factory(url)()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def record_run(url: Optional[str], seed: int, config_digest: str, timings: Sequence[Tuple[str, float, int]],
               counts: Dict[str, int], hierarchy_sha256: Optional[str] = None,
               error: Optional[str] = None) -> Optional[int]:
    """Store one pipeline run; a ledger failure is logged and never fails the run"""
    if not url:
        return None
    try:
        with ledger_session(url) as session:
            run = RunRecord(
                seed=str(seed),
                config_digest=config_digest,
                hierarchy_sha256=hierarchy_sha256,
                n_videos=counts.get("videos", 0),
                n_segments=counts.get("segments", 0),
                n_informative=counts.get("informative", 0),
                n_contexts=counts.get("contexts", 0),
                succeeded=error is None,
                error=error,
            )
            run.timings = [
                StageTiming(position=n, stage=stage, seconds=seconds, items=items)
                for n, (stage, seconds, items) in enumerate(timings)
            ]
            session.add(run)
            session.flush()
            return run.id
    except SQLAlchemyError as e:
        logger.error(f"Error recording run in ledger: {e}")
        return None


def record_classifier(url: Optional[str], kind: str, path: str, n_features: int, training_accuracy: float,
                      hyper: Dict) -> Optional[int]:
    if not url:
        return None
    try:
        with ledger_session(url) as session:
            artifact = ClassifierArtifact(kind=kind, path=path, n_features=n_features,
                                          training_accuracy=training_accuracy)
            artifact.set_hyper(hyper)
            session.add(artifact)
            session.flush()
            return artifact.id
    except SQLAlchemyError as e:
        logger.error(f"Error recording classifier in ledger: {e}")
        return None


def list_runs(url: str, limit: int = 20) -> List[Dict]:
    """Most recent runs first, with their stage timings"""
    with ledger_session(url) as session:
        runs = session.scalars(select(RunRecord).order_by(RunRecord.id.desc()).limit(limit)).all()
        return [
            {
                "id": run.id,
                "seed": run.seed,
                "config_digest": run.config_digest,
                "hierarchy_sha256": run.hierarchy_sha256,
                "succeeded": run.succeeded,
                "error": run.error,
                "segments": run.n_segments,
                "informative": run.n_informative,
                "contexts": run.n_contexts,
                "created_at": run.created_at.isoformat() if run.created_at else None,
                "timings": [{"stage": t.stage, "seconds": t.seconds, "items": t.items} for t in run.timings],
            }
            for run in runs
        ]
