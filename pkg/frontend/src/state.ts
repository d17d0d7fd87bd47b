/** Pure session-state transitions: reduce(state, event) -> state.
 *
 * Every UI action and server response flows through here, so the whole
 * behavior is replayable in tests with a stubbed API. No event mutates its
 * input state.
 */

import {
  DetectedBox,
  Prediction,
  SessionState,
  initialState,
} from "./types";

export type Event =
  | { kind: "image-loaded"; imageId: string; width: number; height: number }
  | { kind: "detect-result"; boxes: DetectedBox[] }
  | { kind: "select-at"; x: number; y: number }
  | { kind: "classify-result"; ripeness: Prediction; disease: Prediction | null }
  | { kind: "camera"; on: boolean }
  | { kind: "error"; message: string }
  | { kind: "dismiss-error" }
  | { kind: "busy"; action: string; on: boolean }
  | { kind: "reset" };

export function reduce(state: SessionState, event: Event): SessionState {
  switch (event.kind) {
    case "image-loaded":
      // a fresh image invalidates detections and predictions
      return {
        ...initialState(),
        cameraOn: state.cameraOn,
        busy: state.busy,
        imageId: event.imageId,
        imageWidth: event.width,
        imageHeight: event.height,
      };
    case "detect-result":
      return {
        ...state,
        scanned: true,
        ripeness: null,
        disease: null,
        detections: event.boxes.map((b) => ({ ...b, selected: false })),
      };
    case "select-at": {
      const hit = hitTest(state, event.x, event.y);
      return {
        ...state,
        detections: state.detections.map((d, i) => ({ ...d, selected: i === hit })),
        // selection change makes previous predictions stale
        ripeness: hit === null ? state.ripeness : null,
        disease: hit === null ? state.disease : null,
      };
    }
    case "classify-result":
      return { ...state, ripeness: event.ripeness, disease: event.disease };
    case "camera":
      return { ...state, cameraOn: event.on };
    case "error":
      return { ...state, error: event.message };
    case "dismiss-error":
      return { ...state, error: null };
    case "busy":
      return { ...state, busy: { ...state.busy, [event.action]: event.on } };
    case "reset":
      return initialState();
  }
}

/** Index of the detection containing (x, y) in image space; the box with
 * the highest score wins when several overlap. Returns null on miss. */
export function hitTest(state: SessionState, x: number, y: number): number | null {
  let best: number | null = null;
  state.detections.forEach((d, i) => {
    const inside =
      x >= d.box.x && x <= d.box.x + d.box.w && y >= d.box.y && y <= d.box.y + d.box.h;
    if (inside && (best === null || d.score > state.detections[best].score)) {
      best = i;
    }
  });
  return best;
}

export function selectedDetection(state: SessionState) {
  return state.detections.find((d) => d.selected) ?? null;
}
