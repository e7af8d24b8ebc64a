import streamlit as st
from utils.dataset_manager import DatasetManager
from utils.checkpoint import load_checkpoint
from utils.errors import TafnetError


def setup_navigation():
    """Setup sidebar navigation"""
    with st.sidebar:
        st.markdown("## 🧭 Навигация")

        # Navigation links
        st.markdown("### 📋 Разделы:")

        # Home page
        if st.button("🏠 Главная", use_container_width=True):
            st.session_state.current_page = "home"
            st.rerun()

        # Predict page
        if st.button("🔮 Предсказание", use_container_width=True):
            st.session_state.current_page = "predict"
            st.rerun()

        # Dataset page
        if st.button("🗂️ Датасет", use_container_width=True):
            st.session_state.current_page = "dataset"
            st.rerun()

        # Evaluation page
        if st.button("📈 Оценка модели", use_container_width=True):
            st.session_state.current_page = "evaluation"
            st.rerun()

        st.markdown("---")

        # Resource switcher
        st.markdown("### 📁 Источники:")
        data_dir = st.text_input("Папка датасета:", value=st.session_state.data_dir or "", key="data_dir_input")
        checkpoint = st.text_input("Чекпойнт модели:", value=st.session_state.checkpoint_path or "", key="checkpoint_input")

        # Switch dataset if changed
        if data_dir and data_dir != st.session_state.data_dir:
            st.session_state.data_dir = data_dir
            st.session_state.dataset_manager = DatasetManager(data_dir)
            st.session_state.last_report = None
            st.rerun()

        # Switch checkpoint if changed
        if checkpoint and checkpoint != st.session_state.checkpoint_path:
            st.session_state.checkpoint_path = checkpoint
            try:
                st.session_state.model = load_checkpoint(checkpoint)
            except TafnetError as e:
                st.session_state.model = None
                st.error(f"Не удалось загрузить модель: {e}")
            st.session_state.last_report = None


def get_current_page():
    """Get current page from session state"""
    # current_page is initialized in main app.py
    return st.session_state.current_page
