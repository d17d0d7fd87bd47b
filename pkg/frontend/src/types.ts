export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface DetectedBox {
  box: Box;
  score: number;
}

export interface Prediction {
  label: string;
  probs: Record<string, number>;
}

/** One detection with its selection flag, in image coordinates. */
export interface DetectionState extends DetectedBox {
  selected: boolean;
}

export interface SessionState {
  imageId: string | null;
  imageWidth: number;
  imageHeight: number;
  detections: DetectionState[];
  /** true once a detect call returned, so "no mangoes" can be distinguished
   * from "not scanned yet" */
  scanned: boolean;
  ripeness: Prediction | null;
  disease: Prediction | null;
  cameraOn: boolean;
  error: string | null;
  /** at most one in-flight request per action kind */
  busy: Record<string, boolean>;
}

export const NO_DETECTIONS_MESSAGE = "no mangoes found";

export function initialState(): SessionState {
  return {
    imageId: null,
    imageWidth: 0,
    imageHeight: 0,
    detections: [],
    scanned: false,
    ripeness: null,
    disease: null,
    cameraOn: false,
    error: null,
    busy: {},
  };
}
