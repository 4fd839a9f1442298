"""Run registry tables and helpers.

Functions:
- record_run / finish_run: one row per CLI invocation
- record_report: one row per structure x side of a volumetry report
- load_population(session): stored volumetry as a long population table
"""
import json
import logging
from datetime import datetime

import pandas as pd
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from .db import Base
from .report import VolumetryReport, volume_key

logger = logging.getLogger(__name__)


class Run(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)
    seed = Column(Integer)
    config = Column(Text)
    status = Column(String, default="running")
    out_dir = Column(String)
    created_at = Column(DateTime, default=datetime.utcnow)

    volumes = relationship("VolumeRecord", back_populates="run")


class VolumeRecord(Base):
    __tablename__ = "volumetry"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    subject_id = Column(String, nullable=False, index=True)
    age = Column(Float)
    sex = Column(String)
    structure = Column(String, nullable=False)
    side = Column(String, nullable=False)
    voxels = Column(Integer)
    volume_mm3 = Column(Float)
    percent_icv = Column(Float)

    run = relationship("Run", back_populates="volumes")


def record_run(session, command: str, seed: int, config: dict, out_dir: str) -> Run:
    run = Run(command=command, seed=seed, config=json.dumps(config, sort_keys=True), out_dir=out_dir)
    session.add(run)
    session.commit()
    session.refresh(run)
    return run


def finish_run(session, run: Run, status: str) -> None:
    run.status = status
    session.commit()


def record_report(session, report: VolumetryReport, run: Run = None) -> int:
    rows = [
        VolumeRecord(run_id=run.id if run else None, subject_id=report.subject_id, age=report.age, sex=report.sex,
                     structure=r.structure, side=r.side, voxels=r.voxels, volume_mm3=r.volume_mm3,
                     percent_icv=r.percent_icv)
        for r in report.rows
    ]
    session.add_all(rows)
    session.commit()
    logger.info("recorded %d volumetry rows for %s", len(rows), report.subject_id)
    return len(rows)


def load_population(session, unit: str = "mm3") -> pd.DataFrame:
    """Long table (subject, age, sex, key, value) of every recorded subject."""
    column = VolumeRecord.percent_icv if unit == "percent_icv" else VolumeRecord.volume_mm3
    query = session.query(VolumeRecord.subject_id, VolumeRecord.age, VolumeRecord.sex,
                          VolumeRecord.structure, VolumeRecord.side, column)
    frame = pd.DataFrame(query.all(), columns=["subject", "age", "sex", "structure", "side", "value"])
    frame["key"] = [volume_key(s, side) for s, side in zip(frame["structure"], frame["side"])]
    frame = frame.dropna(subset=["age", "sex", "value"])
    return frame[["subject", "age", "sex", "key", "value"]].drop_duplicates(["subject", "key"], keep="last")
