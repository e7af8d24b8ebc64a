import streamlit as st
from pathlib import Path
from utils.errors import TafnetError
from utils.metrics import SPLITS
from utils.trainer import TRACE_NAME, evaluate, prepare_split, read_trace
from pages.predict import get_normalization

SPLIT_LABELS = {"all": "Все", "bright": "☀️ Светлые", "dark": "🌙 Тёмные"}


class EvaluationPage:
    def render(self):
        st.markdown("# 📈 Оценка модели")

        if not st.session_state.model:
            st.error("Модель не загружена. Укажите чекпойнт в боковой панели.")
            return

        self._render_trace()

        if not st.session_state.dataset_manager:
            st.warning("Датасет не выбран, оценка недоступна.")
            return

        st.markdown("## 🧪 Запуск оценки")
        available = st.session_state.dataset_manager.available_splits()
        if not available:
            st.info("📭 В папке датасета нет ни одной части.")
            return

        col1, col2 = st.columns(2)
        with col1:
            split = st.selectbox("Часть датасета:", available, index=len(available) - 1)
        with col2:
            drop = st.selectbox("Отключить модальность:", ["нет", "rgb", "thermal"])

        if st.button("▶️ Оценить", use_container_width=True):
            self._run_evaluation(split, None if drop == "нет" else drop)

        if st.session_state.last_report:
            self._render_report(st.session_state.last_report)

    def _run_evaluation(self, split, drop_modality):
        progress_bar = st.progress(0)
        status_text = st.empty()
        try:
            status_text.text("Чтение сцен...")
            pairs = st.session_state.dataset_manager.get_split(split)
            prepared = prepare_split(pairs, get_normalization())
            progress_bar.progress(0.3)

            status_text.text(f"Оценка на {len(prepared)} снимках...")
            report = evaluate(st.session_state.model, prepared, drop_modality=drop_modality)
            progress_bar.progress(1.0)
        except TafnetError as e:
            st.error(f"❌ Ошибка оценки: {e}")
            return
        finally:
            status_text.empty()

        st.session_state.last_report = report
        st.success("✅ Оценка завершена")

    def _render_report(self, report):
        """Aggregate table and per-image rows"""
        st.markdown("## 📊 Результаты")
        rows = []
        for name in SPLITS:
            metrics = report.splits.get(name)
            row = {"Снимки": SPLIT_LABELS[name]}
            if metrics is None:
                row["Кол-во"] = 0
            else:
                row["Кол-во"] = metrics.images
                row.update({key.upper(): round(value, 4) for key, value in metrics.as_dict().items()})
            rows.append(row)
        st.dataframe(rows, use_container_width=True, hide_index=True)

        with st.expander(f"🔍 По снимкам ({len(report.images)})"):
            st.dataframe(
                [
                    {"id": r.id, "освещённость": r.illumination, "разметка": r.gt_count, "предсказание": round(r.pred_count, 3)}
                    for r in report.images
                ],
                use_container_width=True,
                hide_index=True
            )

    def _render_trace(self):
        """Training curve from the trace next to the checkpoint"""
        trace_path = Path(st.session_state.checkpoint_path).parent / TRACE_NAME
        if not trace_path.is_file():
            return
        try:
            trace = read_trace(trace_path)
        except TafnetError as e:
            st.warning(f"Не удалось прочитать журнал обучения: {e}")
            return

        st.markdown("## 📉 Обучение")
        st.line_chart({"train_loss": [r.train_loss for r in trace.records]})
        validated = [r for r in trace.records if r.val_game0 is not None]
        if validated:
            st.line_chart({
                "val_game0": [r.val_game0 for r in validated],
                "val_rmse": [r.val_rmse for r in validated],
            })
        best = trace.best_epoch
        st.caption(f"Лучшая эпоха: {best if best is not None else '-'}")


def render_evaluation_page():
    """Render the evaluation page"""
    evaluation_page = EvaluationPage()
    evaluation_page.render()
