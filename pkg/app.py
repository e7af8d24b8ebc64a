import streamlit as st
from utils.navigation import setup_navigation, get_current_page
from utils.config import get_dashboard_settings
from utils.dataset_manager import DatasetManager
from utils.checkpoint import load_checkpoint
from utils.errors import TafnetError

# Page configuration
st.set_page_config(
    page_title="TAFNet RGB-T Counting",
    page_icon="🌡️",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Initialize session state
if 'data_dir' not in st.session_state:
    st.session_state.data_dir = None
if 'checkpoint_path' not in st.session_state:
    st.session_state.checkpoint_path = None
if 'dataset_manager' not in st.session_state:
    st.session_state.dataset_manager = None
if 'model' not in st.session_state:
    st.session_state.model = None
if 'last_report' not in st.session_state:
    st.session_state.last_report = None
if 'current_page' not in st.session_state:
    st.session_state.current_page = 'home'


def load_resources():
    """Open the dataset and checkpoint configured in secrets or the environment"""
    settings = get_dashboard_settings()
    if st.session_state.data_dir is None:
        st.session_state.data_dir = settings.data_dir
    if st.session_state.checkpoint_path is None:
        st.session_state.checkpoint_path = settings.checkpoint

    if st.session_state.data_dir and not st.session_state.dataset_manager:
        st.session_state.dataset_manager = DatasetManager(st.session_state.data_dir)

    if st.session_state.checkpoint_path and not st.session_state.model:
        try:
            st.session_state.model = load_checkpoint(st.session_state.checkpoint_path)
        except TafnetError as e:
            st.error(f"Не удалось загрузить модель: {e}")


def main():
    load_resources()

    # Setup navigation
    setup_navigation()

    current_page = get_current_page()

    # Route to appropriate page
    if current_page == 'predict':
        from pages.predict import render_predict_page
        render_predict_page()
    elif current_page == 'dataset':
        from pages.dataset import render_dataset_page
        render_dataset_page()
    elif current_page == 'evaluation':
        from pages.evaluation import render_evaluation_page
        render_evaluation_page()
    else:
        # Home page
        render_home_page()


def render_home_page():
    """Render the home page"""
    st.markdown("## 🌡️ Подсчёт людей по RGB и тепловизионным снимкам")

    col1, col2 = st.columns(2)
    with col1:
        st.info(f"📁 **Датасет:** {st.session_state.data_dir or 'не выбран'}")
    with col2:
        st.info(f"🧠 **Модель:** {st.session_state.checkpoint_path or 'не выбрана'}")

    st.markdown("""
    ### Добро пожаловать!

    **Возможности:**
    - 🔮 Предсказание карты плотности для пары RGB + тепловизор
    - 🗂️ Просмотр сцен датасета (светлые и тёмные)
    - 📈 Оценка модели: GAME(0..3) и RMSE по освещённости

    Используйте навигацию слева для перехода между разделами.
    """)

    # Quick stats
    if st.session_state.dataset_manager:
        st.markdown("### 📊 Быстрая статистика")
        try:
            stats = st.session_state.dataset_manager.get_statistics()
        except TafnetError as e:
            st.error(f"Ошибка чтения датасета: {e}")
            stats = {}

        columns = st.columns(max(1, len(stats)))
        for column, (split, split_stats) in zip(columns, stats.items()):
            with column:
                st.metric(f"🖼️ {split}", split_stats['images'])
                st.caption(
                    f"☀️ {split_stats['bright']} / 🌙 {split_stats['dark']} · "
                    f"в среднем {split_stats['mean_count']:.1f} чел."
                )

    if st.session_state.model:
        st.markdown("### 🧠 Модель")
        model = st.session_state.model
        col1, col2, col3 = st.columns(3)
        with col1:
            st.metric("Вариант", model.config.variant.value)
        with col2:
            st.metric("Множитель ширины", f"{model.config.width_multiplier:g}")
        with col3:
            st.metric("Параметров", f"{model.num_values():,}")


if __name__ == "__main__":
    main()
