# perspectiva/__init__.py
"""
Laboratorio de toma de perspectiva: mundo en grilla dominante/subordinado,
agente Q recurrente con codificaciones egocéntricas/alocéntricas, experimento
supervisado de visibilidad y sondas lineales por capa.

Los módulos se importan directamente, por ejemplo:
    from perspectiva import gridworld, percept, qagent
"""

__version__ = "1.0.0"
