from datetime import datetime, timezone
import json

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import DeclarativeBase, relationship


# Ledger schema
class Base(DeclarativeBase):
    pass


def _now():
    return datetime.now(timezone.utc)


class RunRecord(Base):
    __tablename__ = "run_record"

    id = Column(Integer, primary_key=True)
    seed = Column(String(32), nullable=False)  # u64 does not fit a signed integer column
    config_digest = Column(String(64), nullable=False)
    hierarchy_sha256 = Column(String(64))
    n_videos = Column(Integer, default=0)
    n_segments = Column(Integer, default=0)
    n_informative = Column(Integer, default=0)
    n_contexts = Column(Integer, default=0)
    succeeded = Column(Boolean, default=False)
    error = Column(Text)
    created_at = Column(DateTime, default=_now)

    timings = relationship("StageTiming", back_populates="run", cascade="all, delete-orphan",
                           order_by="StageTiming.position")

    def __repr__(self):
        return f'<RunRecord {self.id} seed={self.seed}>'


class StageTiming(Base):
    __tablename__ = "stage_timing"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("run_record.id"), nullable=False)
    position = Column(Integer, nullable=False)
    stage = Column(String(32), nullable=False)
    seconds = Column(Float, nullable=False)
    items = Column(Integer, default=0)

    run = relationship("RunRecord", back_populates="timings")

    def __repr__(self):
        return f'<StageTiming {self.stage} {self.seconds:.3f}s>'


class ClassifierArtifact(Base):
    __tablename__ = "classifier_artifact"

    id = Column(Integer, primary_key=True)
    kind = Column(String(32), nullable=False)
    path = Column(String(512), nullable=False)
    n_features = Column(Integer, nullable=False)
    training_accuracy = Column(Float)
    hyper = Column(Text)  # JSON string of hyper-parameters
    created_at = Column(DateTime, default=_now)

    def __repr__(self):
        return f'<ClassifierArtifact {self.kind} {self.path}>'

    def get_hyper(self):
        """Return hyper-parameters as a dict"""
        if self.hyper:
            return json.loads(self.hyper)
        return {}

    def set_hyper(self, hyper):
        """Store hyper-parameters as JSON string"""
        if hyper is not None:
            self.hyper = json.dumps(hyper, sort_keys=True)
