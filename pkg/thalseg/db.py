"""SQLAlchemy engine and session factory for the run registry.

The URL comes from THALSEG_DATABASE_URL (see config.get_database_url);
`configure(url)` rebinds the module to another database.
"""
from contextlib import contextmanager

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from .config import get_database_url

Base = declarative_base()
SessionLocal = sessionmaker(autocommit=False, autoflush=False)
engine = None


def configure(url: str = None):
    """Bind the session factory to `url` (default from the environment)."""
    global engine
    url = url or get_database_url()
    engine = create_engine(url, connect_args={"check_same_thread": False} if url.startswith("sqlite") else {})
    SessionLocal.configure(bind=engine)
    return engine


def init_db(url: str = None):
    """Create tables."""
    from . import records  # noqa: F401  registers the table classes

    bound = configure(url) if url or engine is None else engine
    Base.metadata.create_all(bind=bound)
    return bound


@contextmanager
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
