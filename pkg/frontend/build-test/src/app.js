import { ApiClient } from "./api.js";
import { DomView } from "./viewer.js";
import { setOverlayOpacity } from "./state.js";
import { WorkflowController } from "./workflow.js";
function byId(id) {
    return document.getElementById(id);
}
function boot() {
    const api = new ApiClient("");
    const view = new DomView(api);
    const controller = new WorkflowController(api, view);
    view.bind({
        selectSource: (id) => controller.selectSource(id),
        toggleTarget: (id) => controller.toggleTarget(id),
        jump: (id) => controller.jumpToBest(id),
    });
    const sliceImg = byId("source-slice");
    sliceImg.addEventListener("click", (ev) => {
        const rect = sliceImg.getBoundingClientRect();
        controller.pickPointAt(ev.clientX - rect.left, ev.clientY - rect.top, view.scale);
    });
    sliceImg.addEventListener("wheel", (ev) => {
        ev.preventDefault();
        controller.setSlice(controller.state.sliceIndex + (ev.deltaY > 0 ? 1 : -1));
    });
    document.addEventListener("keydown", (ev) => {
        if (ev.key === "ArrowUp")
            controller.setSlice(controller.state.sliceIndex - 1);
        if (ev.key === "ArrowDown")
            controller.setSlice(controller.state.sliceIndex + 1);
    });
    byId("axis-select").addEventListener("change", (ev) => {
        controller.state.axis =
            ev.target.value;
        controller.setSlice(controller.state.sliceIndex);
    });
    byId("preset-select").addEventListener("change", (ev) => {
        controller.state.preset =
            ev.target.value;
        controller.setSlice(controller.state.sliceIndex);
    });
    byId("opacity").addEventListener("input", (ev) => {
        setOverlayOpacity(controller.state, Number(ev.target.value));
        view.renderOverlay(controller.state, controller.state.activeJobId ?? "");
    });
    byId("run-search").addEventListener("click", () => {
        void controller.runSearch();
    });
    void controller.loadVolumeList().then(() => {
        if (controller.state.volumes.length > 0) {
            controller.selectSource(controller.state.volumes[0].id);
        }
    });
}
document.addEventListener("DOMContentLoaded", boot);
