# db.py
import logging
import os
import uuid
from datetime import datetime
from typing import Optional

from sqlalchemy import Column, DateTime, Float, Integer, String, Text, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# SQLite by default; any SQLAlchemy URL works through DATABASE_URL
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./ratspec.db")

# FastAPI may open and close a request session on different threads
connect_args = {"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {}
engine = create_engine(DATABASE_URL, connect_args=connect_args)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"
    run_id = Column(String, primary_key=True, default=lambda: str(uuid.uuid4()))
    started_at = Column(DateTime, default=datetime.utcnow)
    completed_at = Column(DateTime, nullable=True)
    status = Column(String, default="running")
    expression = Column(Text, nullable=False)
    seed = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False)
    output_dir = Column(String, nullable=True)
    max_n = Column(Integer, nullable=True)
    mean_ks_at_max_n = Column(Float, nullable=True)
    error_message = Column(Text, nullable=True)


# Create all tables
def create_tables():
    Base.metadata.create_all(bind=engine)


# Dependency to get DB session
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def start_run(expression: str, seed: int, config_json: str, output_dir: Optional[str]) -> Optional[str]:
    """Insert a ``running`` row; returns its id, or None when the ledger is unavailable."""
    db = SessionLocal()
    try:
        create_tables()
        run = ExperimentRun(expression=expression, seed=seed, config_json=config_json, output_dir=output_dir)
        db.add(run)
        db.commit()
        return run.run_id
    except Exception as e:
        logger.error("Could not record run start: %s", e)
        db.rollback()
        return None
    finally:
        db.close()


def finish_run(
    run_id: Optional[str],
    status: str,
    max_n: Optional[int] = None,
    mean_ks_at_max_n: Optional[float] = None,
    error_message: Optional[str] = None,
) -> None:
    if run_id is None:
        return
    db = SessionLocal()
    try:
        run = db.query(ExperimentRun).filter(ExperimentRun.run_id == run_id).first()
        if run is None:
            logger.error("Run %s vanished from the ledger", run_id)
            return
        run.status = status
        run.completed_at = datetime.utcnow()
        run.max_n = max_n
        run.mean_ks_at_max_n = mean_ks_at_max_n
        run.error_message = error_message
        db.commit()
    except Exception as e:
        logger.error("Could not record run %s as %s: %s", run_id, status, e)
        db.rollback()
    finally:
        db.close()


def list_runs(limit: int = 20, session: Optional[Session] = None):
    """Most recent runs first; uses ``session`` when given, else a short-lived one."""
    db = session or SessionLocal()
    try:
        Base.metadata.create_all(bind=db.get_bind())
        return (
            db.query(ExperimentRun)
            .order_by(ExperimentRun.started_at.desc())
            .limit(limit)
            .all()
        )
    finally:
        if session is None:
            db.close()
