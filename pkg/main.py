# main.py
# 用法：python main.py sweep --config experiments/toy.yaml
from flask.cli import FlaskGroup

from app import create_app

app = create_app()
cli = FlaskGroup(create_app=lambda: app)

if __name__ == '__main__':
    cli()
