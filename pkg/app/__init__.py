# app/__init__.py
import logging
import os

from flask import Flask
from flask_migrate import Migrate
from flask_sqlalchemy import SQLAlchemy

from config import Config

db = SQLAlchemy()
migrate = Migrate()

LOG_FORMAT = '[%(levelname)s] %(asctime)s - %(name)s - %(message)s'


def configure_logging(level):
    root = logging.getLogger()
    if not any(getattr(h, '_tamt', False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._tamt = True
        root.addHandler(handler)
    root.setLevel(level)


def create_app(config_class=Config):
    app = Flask(__name__, instance_relative_config=True)
    app.config.from_object(config_class)
    os.makedirs(app.instance_path, exist_ok=True)
    configure_logging(app.config['LOG_LEVEL'])

    db.init_app(app)
    migrate.init_app(app, db)

    with app.app_context():
        from app import models  # noqa: F401  注册表结构

    from app.cli import register as register_cli
    register_cli(app)
    return app
