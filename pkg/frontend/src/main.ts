/** Operator app wiring: DOM events -> API calls -> state events -> render. */

import { ApiClient } from "./api";
import { renderBars } from "./bars";
import { Camera } from "./camera";
import { displayScale, drawDetections, toImageCoords } from "./overlay";
import { Event, reduce, selectedDetection } from "./state";
import { NO_DETECTIONS_MESSAGE, SessionState, initialState } from "./types";

export interface ImageMeta {
  width: number;
  height: number;
}

export type MeasureImage = (png: Blob) => Promise<ImageMeta>;

/** Decode a PNG in the browser to learn its pixel dimensions. */
const browserMeasure: MeasureImage = (png) =>
  new Promise((resolve, reject) => {
    const url = URL.createObjectURL(png);
    const img = new Image();
    img.onload = () => {
      URL.revokeObjectURL(url);
      resolve({ width: img.naturalWidth, height: img.naturalHeight });
    };
    img.onerror = () => {
      URL.revokeObjectURL(url);
      reject(new Error("could not decode image"));
    };
    img.src = url;
  });

export interface App {
  state(): SessionState;
  loadImage(png: Blob): Promise<void>;
  selectFruit(): Promise<void>;
  clickAt(offsetX: number, offsetY: number): void;
  classify(): Promise<void>;
  toggleCamera(): Promise<void>;
  captureFrame(): Promise<void>;
}

export function createApp(
  root: HTMLElement,
  api: ApiClient,
  measure: MeasureImage = browserMeasure,
): App {
  root.innerHTML = `
    <div class="banner hidden" data-role="banner">
      <span data-role="banner-text"></span>
      <button data-role="banner-dismiss">dismiss</button>
    </div>
    <div class="toolbar">
      <label class="button">Load Image<input data-role="file" type="file" accept="image/png,image/*" hidden></label>
      <button data-role="camera">Open Camera</button>
      <button data-role="capture" class="hidden">Capture</button>
      <button data-role="detect" disabled>Select Fruit</button>
      <button data-role="classify" disabled>Classify</button>
    </div>
    <div class="stage">
      <div class="viewport">
        <img data-role="photo" alt="">
        <canvas data-role="overlay"></canvas>
        <video data-role="preview" class="hidden" muted playsinline></video>
        <p class="notice hidden" data-role="notice"></p>
      </div>
      <div class="results">
        <section>
          <h2>Ripeness</h2>
          <div data-role="ripeness-bars" class="bars"></div>
        </section>
        <section class="hidden" data-role="disease-panel">
          <h2>Disease</h2>
          <div data-role="disease-bars" class="bars"></div>
        </section>
      </div>
    </div>`;

  const el = {
    banner: root.querySelector<HTMLElement>('[data-role="banner"]')!,
    bannerText: root.querySelector<HTMLElement>('[data-role="banner-text"]')!,
    bannerDismiss: root.querySelector<HTMLButtonElement>('[data-role="banner-dismiss"]')!,
    file: root.querySelector<HTMLInputElement>('[data-role="file"]')!,
    cameraButton: root.querySelector<HTMLButtonElement>('[data-role="camera"]')!,
    captureButton: root.querySelector<HTMLButtonElement>('[data-role="capture"]')!,
    detectButton: root.querySelector<HTMLButtonElement>('[data-role="detect"]')!,
    classifyButton: root.querySelector<HTMLButtonElement>('[data-role="classify"]')!,
    photo: root.querySelector<HTMLImageElement>('[data-role="photo"]')!,
    overlay: root.querySelector<HTMLCanvasElement>('[data-role="overlay"]')!,
    preview: root.querySelector<HTMLVideoElement>('[data-role="preview"]')!,
    notice: root.querySelector<HTMLElement>('[data-role="notice"]')!,
    ripenessBars: root.querySelector<HTMLElement>('[data-role="ripeness-bars"]')!,
    diseasePanel: root.querySelector<HTMLElement>('[data-role="disease-panel"]')!,
    diseaseBars: root.querySelector<HTMLElement>('[data-role="disease-bars"]')!,
  };

  let state = initialState();
  let diseaseTrigger = ["bad mango"];
  const camera = new Camera();

  function dispatch(event: Event) {
    state = reduce(state, event);
    render();
  }

  function render() {
    el.banner.classList.toggle("hidden", state.error === null);
    el.bannerText.textContent = state.error ?? "";

    el.detectButton.disabled = state.imageId === null || Boolean(state.busy["detect"]);
    el.classifyButton.disabled = state.imageId === null || Boolean(state.busy["classify"]);
    el.cameraButton.textContent = state.cameraOn ? "Close Camera" : "Open Camera";
    el.captureButton.classList.toggle("hidden", !state.cameraOn);
    el.preview.classList.toggle("hidden", !state.cameraOn);

    const empty = state.scanned && state.detections.length === 0;
    el.notice.classList.toggle("hidden", !empty);
    el.notice.textContent = empty ? NO_DETECTIONS_MESSAGE : "";

    if (state.imageWidth > 0 && el.overlay.width > 0) {
      drawDetections(
        el.overlay,
        state.detections,
        displayScale(state.imageWidth, state.imageHeight, el.overlay),
      );
    }

    if (state.ripeness) {
      renderBars(el.ripenessBars, state.ripeness.probs);
    } else {
      el.ripenessBars.innerHTML = "";
    }
    el.diseasePanel.classList.toggle("hidden", state.disease === null);
    if (state.disease) {
      renderBars(el.diseaseBars, state.disease.probs);
    }
  }

  async function guarded(action: string, work: () => Promise<void>) {
    if (state.busy[action]) return;
    dispatch({ kind: "busy", action, on: true });
    try {
      await work();
    } catch (err) {
      dispatch({ kind: "error", message: err instanceof Error ? err.message : String(err) });
    } finally {
      dispatch({ kind: "busy", action, on: false });
    }
  }

  const app: App = {
    state: () => state,

    loadImage: (png) =>
      guarded("upload", async () => {
        const imageId = await api.uploadImage(png);
        const meta = await measure(png);
        el.photo.src = api.imageUrl(imageId);
        el.overlay.width = meta.width;
        el.overlay.height = meta.height;
        dispatch({ kind: "image-loaded", imageId, width: meta.width, height: meta.height });
      }),

    selectFruit: () =>
      guarded("detect", async () => {
        if (!state.imageId) return;
        const boxes = await api.detect(state.imageId);
        dispatch({ kind: "detect-result", boxes });
      }),

    clickAt: (offsetX, offsetY) => {
      if (state.imageWidth === 0) return;
      const scale = displayScale(state.imageWidth, state.imageHeight, el.overlay);
      const point = toImageCoords({ offsetX, offsetY }, scale);
      dispatch({ kind: "select-at", x: point.x, y: point.y });
    },

    classify: () =>
      guarded("classify", async () => {
        if (!state.imageId) return;
        const selected = selectedDetection(state);
        if (!selected && state.detections.length > 0) {
          dispatch({ kind: "error", message: "select a fruit first" });
          return;
        }
        const box = selected?.box;
        const ripeness = await api.classify(state.imageId, "ripeness", box);
        const disease = diseaseTrigger.includes(ripeness.label)
          ? await api.classify(state.imageId, "disease", box)
          : null;
        dispatch({ kind: "classify-result", ripeness, disease });
      }),

    toggleCamera: () =>
      guarded("camera", async () => {
        if (camera.active) {
          camera.stop(el.preview);
          dispatch({ kind: "camera", on: false });
          return;
        }
        try {
          await camera.start(el.preview);
          dispatch({ kind: "camera", on: true });
        } catch (err) {
          dispatch({ kind: "camera", on: false });
          dispatch({
            kind: "error",
            message: `camera unavailable: ${err instanceof Error ? err.message : String(err)}`,
          });
        }
      }),

    captureFrame: async () => {
      if (!camera.active) return;
      const frame = await camera.capture(el.preview);
      await app.loadImage(frame);
    },
  };

  el.bannerDismiss.addEventListener("click", () => dispatch({ kind: "dismiss-error" }));
  el.file.addEventListener("change", () => {
    const file = el.file.files?.[0];
    if (file) void app.loadImage(file);
    el.file.value = "";
  });
  el.cameraButton.addEventListener("click", () => void app.toggleCamera());
  el.captureButton.addEventListener("click", () => void app.captureFrame());
  el.detectButton.addEventListener("click", () => void app.selectFruit());
  el.classifyButton.addEventListener("click", () => void app.classify());
  el.overlay.addEventListener("click", (ev) => app.clickAt(ev.offsetX, ev.offsetY));

  // best effort: learn the configured disease trigger from the server
  void api
    .models()
    .then((doc) => {
      if (Array.isArray(doc.disease_trigger)) {
        diseaseTrigger = doc.disease_trigger;
      }
    })
    .catch(() => undefined);

  render();
  return app;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  createApp(document.getElementById("app")!, new ApiClient());
}
