import os
import time
import logging
import functools
from datetime import datetime, timezone
from typing import Optional, Dict, Any, List

from sqlalchemy import create_engine, Column, String, DateTime, Integer, Float, Boolean, ForeignKey, JSON
from sqlalchemy.orm import declarative_base, sessionmaker, relationship
from sqlalchemy.exc import OperationalError, DisconnectionError

logger = logging.getLogger(__name__)

Base = declarative_base()


def _now():
    return datetime.now(timezone.utc)


def default_database_url(out_dir: str) -> str:
    """CCAN_DATABASE_URL if set, else a SQLite file next to the run outputs"""
    url = os.getenv('CCAN_DATABASE_URL')
    if url:
        return url
    return f"sqlite:///{os.path.abspath(os.path.join(out_dir, 'runs.db'))}"


# Models
class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String, nullable=False)  # train, eval, ablate
    setting = Column(String, index=True)
    fingerprint = Column(String, index=True)  # SHA-256 of the resolved config
    status = Column(String, default='running')  # running, completed, failed
    output_dir = Column(String)
    started_at = Column(DateTime(timezone=True), default=_now)
    finished_at = Column(DateTime(timezone=True), nullable=True)
    error = Column(String, nullable=True)

    # Relationships
    epochs = relationship("EpochRow", back_populates="run", cascade="all, delete-orphan")
    evals = relationship("EvalRow", back_populates="run", cascade="all, delete-orphan")


class EpochRow(Base):
    __tablename__ = "epoch_records"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    epoch = Column(Integer)
    lr = Column(Float)
    ce_G = Column(Float)
    tri_G = Column(Float)
    ce_L = Column(Float)
    tri_L = Column(Float)
    total = Column(Float)
    wall_time = Column(Float)
    erasing = Column(Boolean, default=False)

    run = relationship("Run", back_populates="epochs")


class EvalRow(Base):
    __tablename__ = "eval_records"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    mAP = Column(Float)
    rank1 = Column(Float)
    rank5 = Column(Float, nullable=True)
    rank10 = Column(Float, nullable=True)
    queries_evaluated = Column(Integer)
    queries_skipped = Column(Integer)
    extra = Column(JSON, default=dict)  # d, k_p and other sweep coordinates
    created_at = Column(DateTime(timezone=True), default=_now)

    run = relationship("Run", back_populates="evals")


# Ledger helper class
class DatabaseManager:
    """Local bookkeeping of train/eval/ablate runs; query methods return plain dicts"""

    def __init__(self, url: str):
        self.url = url
        connect_args = {"timeout": 30} if url.startswith('sqlite') else {"connect_timeout": 30}
        self.engine = create_engine(url, pool_pre_ping=True, connect_args=connect_args)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self.create_tables()

    def create_tables(self):
        """Create all tables if they don't exist"""
        Base.metadata.create_all(bind=self.engine)

    def get_session(self):
        """Get a database session"""
        return self.SessionLocal()

    def execute_with_retry(self, operation, max_retries=3, delay=1):
        """Execute database operation with retry logic for locked or dropped connections"""
        for attempt in range(max_retries):
            try:
                return operation()
            except (OperationalError, DisconnectionError) as e:
                if attempt == max_retries - 1:
                    logger.error(f"Database operation failed after {max_retries} attempts: {str(e)}")
                    raise
                logger.warning(f"Database connection issue (attempt {attempt + 1}): {str(e)}. Retrying...")
                time.sleep(delay * (attempt + 1))
            except Exception as e:
                logger.error(f"Unexpected database error: {str(e)}")
                raise

    def start_run(self, command: str, setting: str, fingerprint: str, output_dir: str) -> int:
        """Open a run record and return its id"""
        def _start():
            session = self.get_session()
            try:
                run = Run(command=command, setting=setting, fingerprint=fingerprint, output_dir=output_dir)
                session.add(run)
                session.commit()
                session.refresh(run)
                return run.id
            finally:
                session.close()

        return self.execute_with_retry(_start)

    def finish_run(self, run_id: int, status: str = 'completed', error: Optional[str] = None) -> None:
        def _finish():
            session = self.get_session()
            try:
                run = session.query(Run).filter(Run.id == run_id).first()
                if run:
                    run.status = status
                    run.error = error
                    run.finished_at = _now()
                    session.commit()
            finally:
                session.close()

        self.execute_with_retry(_finish)

    def record_epoch(self, run_id: int, record) -> None:
        """Store one training epoch (an optim EpochRecord)"""
        def _record():
            session = self.get_session()
            try:
                session.add(EpochRow(
                    run_id=run_id, epoch=record.epoch, lr=record.lr, ce_G=record.ce_G, tri_G=record.tri_G,
                    ce_L=record.ce_L, tri_L=record.tri_L, total=record.total,
                    wall_time=record.wall_time, erasing=record.erasing))
                session.commit()
            finally:
                session.close()

        self.execute_with_retry(_record)

    def record_eval(self, run_id: int, report, extra: Optional[Dict[str, Any]] = None) -> None:
        """Store the headline numbers of an EvalReport"""
        def cmc_at(r):
            return report.cmc[r - 1] if len(report.cmc) >= r else None

        def _record():
            session = self.get_session()
            try:
                session.add(EvalRow(
                    run_id=run_id, mAP=report.mAP, rank1=cmc_at(1), rank5=cmc_at(5), rank10=cmc_at(10),
                    queries_evaluated=report.evaluated, queries_skipped=report.skipped, extra=extra or {}))
                session.commit()
            finally:
                session.close()

        self.execute_with_retry(_record)

    def find_completed_run(self, fingerprint: str, setting: str) -> Optional[Dict[str, Any]]:
        """Latest completed run with this config fingerprint and setting, with its last evaluation"""
        session = self.get_session()
        try:
            run = (session.query(Run)
                   .filter(Run.fingerprint == fingerprint, Run.setting == setting, Run.status == 'completed')
                   .order_by(Run.id.desc())
                   .first())
            if not run or not run.evals:
                return None
            last = max(run.evals, key=lambda row: row.id)
            return {
                'run_id': run.id,
                'setting': run.setting,
                'output_dir': run.output_dir,
                'mAP': last.mAP,
                'rank1': last.rank1,
                'rank5': last.rank5,
                'rank10': last.rank10,
                'extra': last.extra or {},
            }
        finally:
            session.close()

    def get_run_summaries(self, limit: int = 50) -> List[Dict[str, Any]]:
        """Most recent runs first"""
        session = self.get_session()
        try:
            runs = session.query(Run).order_by(Run.id.desc()).limit(limit).all()
            summaries = []
            for run in runs:
                last_eval = max(run.evals, key=lambda row: row.id) if run.evals else None
                summaries.append({
                    'run_id': run.id,
                    'command': run.command,
                    'setting': run.setting,
                    'status': run.status,
                    'epochs': len(run.epochs),
                    'final_loss': max(run.epochs, key=lambda row: row.epoch).total if run.epochs else None,
                    'mAP': last_eval.mAP if last_eval else None,
                    'rank1': last_eval.rank1 if last_eval else None,
                    'started_at': run.started_at,
                    'finished_at': run.finished_at,
                })
            return summaries
        finally:
            session.close()


# One manager per database URL
@functools.lru_cache(maxsize=None)
def get_db_manager(url: str) -> DatabaseManager:
    return DatabaseManager(url)
