"""
命令接口模块
"""
